//! Mixture planning and deficit-round-robin interleaving of domain streams.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::Domain;
use crate::keyed::keyed_rng;

pub const DEFAULT_MAX_EPOCHS: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("no domain has a positive target")]
    NoTargets,
    #[error("target for {0} must be finite and non-negative")]
    BadTarget(Domain),
    #[error("{0} has a positive target but no available tokens")]
    Unavailable(Domain),
    #[error("no stream supplied for {0}")]
    MissingStream(Domain),
    #[error("{domain} stream ran out after {passes} pass(es) with {emitted} of {demand} planned tokens emitted")]
    PlanViolated { domain: Domain, passes: usize, emitted: u64, demand: u64 },
    #[error("cannot parse target `{0}`; expected domain=weight")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    /// Normalized to sum to 1; only domains with a positive weight appear.
    pub targets: BTreeMap<Domain, f64>,
    pub available: BTreeMap<Domain, u64>,
    pub epochs: BTreeMap<Domain, f64>,
    pub expected_total: u64,
}

impl MixturePlan {
    pub fn demand(&self, d: Domain) -> u64 {
        (self.targets[&d] * self.expected_total as f64).round() as u64
    }
}

/// Parses `code=0.7,text=0.2,math=0.1`.
pub fn parse_targets(s: &str) -> Result<BTreeMap<Domain, f64>, MixError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| MixError::Parse(p.to_string()))?;
            let d = k.trim().parse::<Domain>().map_err(|_| MixError::Parse(p.to_string()))?;
            let w = v.trim().parse::<f64>().map_err(|_| MixError::Parse(p.to_string()))?;
            Ok((d, w))
        })
        .collect()
}

pub fn plan_mixture(available: &BTreeMap<Domain, u64>, targets: &BTreeMap<Domain, f64>) -> Result<MixturePlan, MixError> {
    plan_mixture_with(available, targets, DEFAULT_MAX_EPOCHS)
}

/// Target weights are normalized. The total is sized so the relatively most plentiful
/// domain is used exactly once, then capped so no domain repeats more than
/// `max_epochs` times.
pub fn plan_mixture_with(
    available: &BTreeMap<Domain, u64>,
    targets: &BTreeMap<Domain, f64>,
    max_epochs: f64,
) -> Result<MixturePlan, MixError> {
    for (&d, &w) in targets {
        if !w.is_finite() || w < 0.0 {
            return Err(MixError::BadTarget(d));
        }
    }
    let sum: f64 = targets.values().sum();
    if sum <= 0.0 {
        return Err(MixError::NoTargets);
    }
    let targets: BTreeMap<Domain, f64> =
        targets.iter().filter(|(_, &w)| w > 0.0).map(|(&d, &w)| (d, w / sum)).collect();
    let mut once = 0.0f64;
    let mut cap = f64::INFINITY;
    for (&d, &t) in &targets {
        let a = available.get(&d).copied().unwrap_or(0);
        if a == 0 {
            return Err(MixError::Unavailable(d));
        }
        once = once.max(a as f64 / t);
        cap = cap.min(a as f64 * max_epochs / t);
    }
    let expected_total = once.min(cap).floor() as u64;
    let epochs = targets
        .iter()
        .map(|(&d, &t)| (d, (t * expected_total as f64 / available[&d] as f64).min(max_epochs)))
        .collect();
    let available = targets.keys().map(|d| (*d, available[d])).collect();
    Ok(MixturePlan { targets, available, epochs, expected_total })
}

/// One scheduled document: `index` into the domain's stream, on repeat pass `pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub domain: Domain,
    pub index: usize,
    pub pass: usize,
    pub tokens: u64,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    pass: usize,
    max_passes: usize,
    emitted: u64,
    done: bool,
}

fn pass_order(n: usize, domain: Domain, pass: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if pass > 0 {
        order.shuffle(&mut keyed_rng(seed, "mix-pass", &format!("{domain}/{pass}")));
    }
    order
}

/// Deficit round-robin: each step emits from the domain with the smallest
/// `emitted / target` (ties to the lexicographically first name) until the planned
/// total is reached. Repeat passes visit the stream in a seeded shuffled order.
/// A domain may stop once it has met its own demand; running out earlier is an error.
pub fn sample_interleaved<T>(
    streams: &BTreeMap<Domain, Vec<T>>,
    plan: &MixturePlan,
    seed: u64,
    tokens: impl Fn(&T) -> u64,
) -> Result<Vec<Emission>, MixError> {
    let mut cursors = BTreeMap::new();
    for (&d, &ep) in &plan.epochs {
        let stream = streams.get(&d).ok_or(MixError::MissingStream(d))?;
        cursors.insert(
            d,
            Cursor {
                order: pass_order(stream.len(), d, 0, seed),
                pos: 0,
                pass: 0,
                max_passes: (ep.ceil() as usize).max(1),
                emitted: 0,
                done: false,
            },
        );
    }
    let mut out = Vec::new();
    let mut total = 0u64;
    while total < plan.expected_total {
        let mut pick: Option<(Domain, f64)> = None;
        for (&d, c) in &cursors {
            if c.done {
                continue;
            }
            let deficit = c.emitted as f64 / plan.targets[&d];
            if pick.is_none_or(|(_, best)| deficit < best) {
                pick = Some((d, deficit));
            }
        }
        let Some((d, _)) = pick else { break };
        let stream = &streams[&d];
        let c = cursors.get_mut(&d).expect("cursor per planned domain");
        if c.pos == c.order.len() {
            c.pass += 1;
            c.pos = 0;
            if c.pass >= c.max_passes || stream.is_empty() {
                let demand = plan.demand(d);
                if c.emitted < demand {
                    return Err(MixError::PlanViolated { domain: d, passes: c.pass, emitted: c.emitted, demand });
                }
                c.done = true;
                continue;
            }
            c.order = pass_order(stream.len(), d, c.pass, seed);
        }
        let index = c.order[c.pos];
        c.pos += 1;
        let t = tokens(&stream[index]);
        c.emitted += t;
        total += t;
        out.push(Emission { domain: d, index, pass: c.pass, tokens: t });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub target: f64,
    pub achieved: f64,
    pub tokens: u64,
    /// Emitted tokens over available tokens.
    pub epochs: f64,
}

pub fn mixture_report(plan: &MixturePlan, emitted: &[Emission]) -> BTreeMap<Domain, DomainReport> {
    let total: u64 = emitted.iter().map(|e| e.tokens).sum();
    plan.targets
        .iter()
        .map(|(&d, &target)| {
            let tokens: u64 = emitted.iter().filter(|e| e.domain == d).map(|e| e.tokens).sum();
            let achieved = if total == 0 { 0.0 } else { tokens as f64 / total as f64 };
            (d, DomainReport { target, achieved, tokens, epochs: tokens as f64 / plan.available[&d] as f64 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Domain::*;

    fn m<V: Clone>(pairs: &[(Domain, V)]) -> BTreeMap<Domain, V> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn exactly_proportioned_supply() {
        let plan = plan_mixture(&m(&[(Code, 7000), (Text, 2000), (Math, 1000)]), &m(&[(Code, 0.7), (Text, 0.2), (Math, 0.1)]))
            .unwrap();
        assert_eq!(plan.expected_total, 10_000);
        assert!(plan.epochs.values().all(|&e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn code_only_row() {
        let plan = plan_mixture(&m(&[(Code, 5000), (Text, 100)]), &m(&[(Code, 1.0)])).unwrap();
        assert_eq!(plan.expected_total, 5000);
        assert_eq!(plan.targets.keys().collect::<Vec<_>>(), [&Code]);
        let stream = m(&[(Code, vec![1000u64; 5])]);
        let out = sample_interleaved(&stream, &plan, 0, |t| *t).unwrap();
        assert_eq!(out.iter().map(|e| e.index).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn unnormalized_weights() {
        let a = plan_mixture(&m(&[(Code, 850), (Text, 150), (Math, 50)]), &m(&[(Code, 85.0), (Text, 15.0), (Math, 5.0)])).unwrap();
        assert!((a.targets.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a.expected_total, 1050);
    }

    #[test]
    fn planning_errors() {
        assert_eq!(plan_mixture(&m(&[(Code, 10)]), &m(&[(Text, 1.0)])), Err(MixError::Unavailable(Text)));
        assert_eq!(plan_mixture(&m(&[(Code, 10)]), &m(&[(Code, 0.0)])), Err(MixError::NoTargets));
    }

    #[test]
    fn scarce_domain_repeats_up_to_cap() {
        let plan = plan_mixture(&m(&[(Code, 9000), (Math, 100)]), &m(&[(Code, 0.9), (Math, 0.1)])).unwrap();
        assert_eq!(plan.expected_total, 4000);
        assert!((plan.epochs[&Math] - 4.0).abs() < 1e-12);
        assert!(plan.epochs[&Code] < 1.0);
    }

    #[test]
    fn fifty_fifty_alternates() {
        let plan = plan_mixture(&m(&[(Code, 100), (Text, 100)]), &m(&[(Code, 0.5), (Text, 0.5)])).unwrap();
        let streams = m(&[(Code, vec![10u64; 10]), (Text, vec![10u64; 10])]);
        let out = sample_interleaved(&streams, &plan, 1, |t| *t).unwrap();
        assert_eq!(out.len(), 20);
        for (i, e) in out.iter().enumerate() {
            assert_eq!(e.domain, if i % 2 == 0 { Code } else { Text });
        }
    }

    #[test]
    fn short_stream_violates_plan() {
        let plan = plan_mixture(&m(&[(Code, 100), (Text, 100)]), &m(&[(Code, 0.5), (Text, 0.5)])).unwrap();
        let streams = m(&[(Code, vec![10u64; 10]), (Text, vec![10u64; 3])]);
        let err = sample_interleaved(&streams, &plan, 1, |t| *t).unwrap_err();
        assert!(matches!(err, MixError::PlanViolated { domain: Text, .. }));
    }

    fn synthetic(seed: u64, n: usize, max: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(1..=max)).collect()
    }

    #[test]
    fn seventy_twenty_ten_over_ten_thousand_docs() {
        let streams = m(&[(Code, synthetic(1, 7000, 200)), (Text, synthetic(2, 2000, 200)), (Math, synthetic(3, 1000, 200))]);
        let available = streams.iter().map(|(&d, s)| (d, s.iter().sum())).collect();
        let plan = plan_mixture(&available, &m(&[(Code, 0.7), (Text, 0.2), (Math, 0.1)])).unwrap();
        let out = sample_interleaved(&streams, &plan, 9, |t| *t).unwrap();
        // count directly from the emitted indices
        let mut per: BTreeMap<Domain, u64> = BTreeMap::new();
        for e in &out {
            *per.entry(e.domain).or_default() += streams[&e.domain][e.index];
        }
        let total: u64 = per.values().sum();
        for (d, t) in &plan.targets {
            let achieved = per[d] as f64 / total as f64;
            assert!((achieved - t).abs() < 0.005, "{d}: {achieved}");
            assert!((achieved - t).abs() <= 200.0 / total as f64);
        }
        let again = sample_interleaved(&streams, &plan, 9, |t| *t).unwrap();
        assert_eq!(out, again);
    }

    proptest! {
        #[test]
        fn plan_respects_supply(a in proptest::collection::vec(1u64..1_000_000, 3), w in proptest::collection::vec(0.0f64..1.0, 3)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let available = m(&[(Code, a[0]), (Text, a[1]), (Math, a[2])]);
            let targets = m(&[(Code, w[0]), (Text, w[1]), (Math, w[2])]);
            let plan = plan_mixture(&available, &targets).unwrap();
            for (d, t) in &plan.targets {
                let demand = t * plan.expected_total as f64;
                prop_assert!(demand <= available[d] as f64 * DEFAULT_MAX_EPOCHS * (1.0 + 1e-9));
                prop_assert!(demand <= available[d] as f64 * plan.epochs[d] * (1.0 + 1e-9) + 1e-6);
            }
        }

        #[test]
        fn drr_error_bound(seed in any::<u64>(), w in proptest::collection::vec(0.05f64..1.0, 3)) {
            let streams = m(&[(Code, synthetic(seed, 300, 50)), (Text, synthetic(seed ^ 1, 300, 50)), (Math, synthetic(seed ^ 2, 300, 50))]);
            let available = streams.iter().map(|(&d, s)| (d, s.iter().sum())).collect();
            let plan = plan_mixture(&available, &m(&[(Code, w[0]), (Text, w[1]), (Math, w[2])])).unwrap();
            let out = sample_interleaved(&streams, &plan, seed, |t| *t).unwrap();
            let report = mixture_report(&plan, &out);
            let total: u64 = out.iter().map(|e| e.tokens).sum();
            for r in report.values() {
                prop_assert!((r.achieved - r.target).abs() <= 50.0 / total as f64 + 1e-12);
            }
        }
    }
}
