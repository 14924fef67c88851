//! Needle-in-the-code probes: a small function hidden as its own file inside packed
//! repository context, plus containment scoring of model responses.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::TokenBudgeter;
use crate::gate::{static_check, StaticCheck};
use crate::keyed::{keyed_rng, stable_id};
use crate::pack::MAX_CONTEXT_BUDGET;
use crate::sentinel::{contains_sentinel, FILE_SEP, REPO_NAME};
use crate::syntax::TreeSitterParser;

pub const DEFAULT_PROMPT_SUFFIX: &str =
    "\nAbove is a code repository. Somewhere in it is a small custom function. Replicate that function exactly as written.\n";

pub const DEFAULT_LENGTHS: [usize; 8] = [4_096, 8_192, 16_384, 32_768, 49_152, 65_536, 98_304, 131_072];

pub fn default_depths() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 9.0).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum NeedleError {
    #[error("corpus supplies {available} tokens but {needed} are needed")]
    InsufficientCorpus { available: usize, needed: usize },
    #[error("needle occurs {count} times in the context")]
    NotUnique { count: usize },
    #[error("needle contains a sentinel string")]
    SentinelCollision,
    #[error("needle does not parse as {language} ({error_nodes} error nodes)")]
    Syntax { language: String, error_nodes: usize },
    #[error("depth {0} outside [0, 1]")]
    Depth(f64),
    #[error("target length {0} is outside 1..={MAX_CONTEXT_BUDGET}")]
    Length(usize),
    #[error("target length {target} cannot hold the header and needle ({fixed} tokens)")]
    TooShort { target: usize, fixed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub needle_source: String,
    pub needle_language: String,
    /// Path under which the needle file is inserted.
    pub needle_path: String,
    pub depth_fraction: f64,
    pub target_length: usize,
    pub seed: u64,
    pub repo_name: String,
    pub prompt_suffix: String,
}

impl NeedleSpec {
    pub fn new(needle_source: &str, needle_language: &str, depth_fraction: f64, target_length: usize) -> Self {
        NeedleSpec {
            needle_source: needle_source.to_string(),
            needle_language: needle_language.to_string(),
            needle_path: "needle_util.py".into(),
            depth_fraction,
            target_length,
            seed: 0,
            repo_name: "haystack".into(),
            prompt_suffix: DEFAULT_PROMPT_SUFFIX.into(),
        }
    }

    pub fn validate(&self) -> Result<(), NeedleError> {
        if !(0.0..=1.0).contains(&self.depth_fraction) {
            return Err(NeedleError::Depth(self.depth_fraction));
        }
        if self.target_length == 0 || self.target_length > MAX_CONTEXT_BUDGET {
            return Err(NeedleError::Length(self.target_length));
        }
        if contains_sentinel(&self.needle_source) || contains_sentinel(&self.needle_path) {
            return Err(NeedleError::SentinelCollision);
        }
        match static_check(&self.needle_source, &self.needle_language, &mut TreeSitterParser::new()) {
            StaticCheck::Reject { error_nodes } => {
                Err(NeedleError::Syntax { language: self.needle_language.clone(), error_nodes })
            }
            StaticCheck::Unsupported => {
                log::warn!("no grammar for needle language `{}`; skipping parse check", self.needle_language);
                Ok(())
            }
            StaticCheck::Ok => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleInstance {
    pub instance_id: String,
    pub depth: f64,
    pub length: usize,
    pub context: String,
    pub prompt_suffix: String,
    pub expected: String,
    /// Corpus tokens before the needle over all corpus tokens.
    pub actual_depth: f64,
    /// Budgeter count of the whole context.
    pub actual_length: usize,
    /// Largest corpus unit, in tokens, as a fraction of all corpus tokens.
    pub granule: f64,
}

impl NeedleInstance {
    pub fn prompt(&self) -> String {
        format!("{}{}", self.context, self.prompt_suffix)
    }
}

fn unit(path: &str, content: &str) -> String {
    format!("{FILE_SEP}{path}\n{content}\n")
}

/// Longest line prefix of `content` whose unit fits in `room` tokens.
fn truncate_to_fit(path: &str, content: &str, room: usize, budgeter: &TokenBudgeter) -> Option<String> {
    let cuts: Vec<usize> = content.match_indices('\n').map(|(i, _)| i + 1).collect();
    let mut best = None;
    for &cut in &cuts {
        let u = unit(path, &content[..cut]);
        if budgeter.count(&u) > room {
            break;
        }
        best = Some(u);
    }
    best
}

/// Builds one probe from `corpus` `(path, content)` files. Files are taken whole in
/// order, starting at a seeded offset, until the target is met; the last one is cut
/// at a line boundary. The needle becomes its own file at the boundary nearest
/// `depth_fraction` of the corpus tokens.
pub fn generate_instance(
    corpus: &[(String, String)],
    spec: &NeedleSpec,
    budgeter: &TokenBudgeter,
) -> Result<NeedleInstance, NeedleError> {
    spec.validate()?;
    let header = format!("{REPO_NAME}{}\n", spec.repo_name);
    let needle_unit = unit(&spec.needle_path, &spec.needle_source);
    let fixed = budgeter.count(&header) + budgeter.count(&needle_unit);
    if fixed >= spec.target_length {
        return Err(NeedleError::TooShort { target: spec.target_length, fixed });
    }
    let fill = spec.target_length - fixed;

    let usable: Vec<&(String, String)> = corpus
        .iter()
        .filter(|(p, c)| !contains_sentinel(p) && !contains_sentinel(c) && !p.contains('\n'))
        .collect();
    let available: usize = usable.iter().map(|(p, c)| budgeter.count(&unit(p, c))).sum();
    if usable.is_empty() || available < fill {
        return Err(NeedleError::InsufficientCorpus { available, needed: fill });
    }
    let start = keyed_rng(spec.seed, "needle-start", &format!("{}", spec.target_length)).random_range(0..usable.len());

    let mut units: Vec<(String, usize)> = Vec::new();
    let mut used = 0;
    for k in 0..usable.len() {
        let (path, content) = usable[(start + k) % usable.len()];
        let u = unit(path, content);
        let t = budgeter.count(&u);
        if used + t <= fill {
            used += t;
            units.push((u, t));
        } else {
            if let Some(cut) = truncate_to_fit(path, content, fill - used, budgeter) {
                let t = budgeter.count(&cut);
                used += t;
                units.push((cut, t));
            }
            if used * 100 >= fill * 95 {
                break;
            }
        }
        if used == fill {
            break;
        }
    }
    if used * 100 < fill * 95 {
        return Err(NeedleError::InsufficientCorpus { available: used, needed: fill });
    }

    let goal = spec.depth_fraction * used as f64;
    let mut before = 0usize;
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..=units.len() {
        let d = (before as f64 - goal).abs();
        if d < best.0 {
            best = (d, i, before);
        }
        if let Some((_, t)) = units.get(i) {
            before += t;
        }
    }
    let (_, index, tokens_before) = best;

    let mut context = header;
    for (i, (u, _)) in units.iter().enumerate() {
        if i == index {
            context.push_str(&needle_unit);
        }
        context.push_str(u);
    }
    if index == units.len() {
        context.push_str(&needle_unit);
    }
    let count = context.matches(spec.needle_source.as_str()).count();
    if count != 1 {
        return Err(NeedleError::NotUnique { count });
    }
    let granule = units.iter().map(|(_, t)| *t).max().unwrap_or(0) as f64 / used.max(1) as f64;
    let instance_id = stable_id(&[
        spec.seed.to_le_bytes().as_slice(),
        spec.depth_fraction.to_le_bytes().as_slice(),
        spec.target_length.to_le_bytes().as_slice(),
        spec.needle_source.as_bytes(),
    ])[..16]
        .to_string();
    Ok(NeedleInstance {
        instance_id,
        depth: spec.depth_fraction,
        length: spec.target_length,
        actual_length: budgeter.count(&context),
        context,
        prompt_suffix: spec.prompt_suffix.clone(),
        expected: spec.needle_source.clone(),
        actual_depth: if used == 0 { 0.0 } else { tokens_before as f64 / used as f64 },
        granule,
    })
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 when the whitespace-normalized needle occurs in the whitespace-normalized response.
pub fn score_response(instance: &NeedleInstance, response: &str) -> u8 {
    let needle = squash(&instance.expected);
    (!needle.is_empty() && squash(response).contains(&needle)) as u8
}

/// One instance per (depth, length), depth-major, generated in parallel.
pub fn generate_grid(
    corpus: &[(String, String)],
    depths: &[f64],
    lengths: &[usize],
    template: &NeedleSpec,
    budgeter: &TokenBudgeter,
) -> Result<Vec<NeedleInstance>, NeedleError> {
    let cells: Vec<(f64, usize)> = depths.iter().flat_map(|&d| lengths.iter().map(move |&l| (d, l))).collect();
    cells
        .par_iter()
        .map(|&(d, l)| {
            let spec = NeedleSpec { depth_fraction: d, target_length: l, ..template.clone() };
            generate_instance(corpus, &spec, budgeter)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleResult {
    pub depth: f64,
    pub length: usize,
    pub score: u8,
}

pub fn results_csv(rows: &[NeedleResult]) -> String {
    let mut out = String::from("depth,length,score\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.depth, r.length, r.score));
    }
    out
}
