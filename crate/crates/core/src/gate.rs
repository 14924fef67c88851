//! Instruction-data gating: fenced code extraction, static parse checks, language
//! labelling and checklist scoring.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyed::keyed_rng;
use crate::syntax::{Grammar, GrammarParser, TreeSitterParser};

pub const NO_LANGUAGE: &str = "No Programming Language";
pub const UNKNOWN_TAG: &str = "unknown";

pub const CRITERIA: [&str; 9] = [
    "consistency",
    "relevance",
    "difficulty",
    "code-exist",
    "code-correctness",
    "best-practices",
    "clarity",
    "comments",
    "educational-value",
];

pub const MAINSTREAM: [&str; 8] = ["python", "cpp", "java", "php", "typescript", "csharp", "shell", "javascript"];

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("{scores} scores but {weights} weights")]
    LengthMismatch { scores: usize, weights: usize },
    #[error("weight {index} is negative or not finite")]
    BadWeight { index: usize },
    #[error("unknown checklist criterion `{0}`")]
    UnknownCriterion(String),
    #[error("invalid gate policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub language: String,
    pub snippet: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub blocks: Vec<CodeBlock>,
    pub warnings: Vec<String>,
}

/// Canonical tag for a fence info string or alias.
pub fn canonical_tag(tag: &str) -> String {
    let t = tag.trim().to_ascii_lowercase();
    if let Some(g) = Grammar::from_tag(&t) {
        return g.tag().to_string();
    }
    match t.as_str() {
        "" => UNKNOWN_TAG.into(),
        "sh" | "bash" | "zsh" | "shell" | "console" => "shell".into(),
        "ts" | "tsx" | "typescript" => "typescript".into(),
        "cs" | "c#" | "csharp" => "csharp".into(),
        "rb" => "ruby".into(),
        "kt" => "kotlin".into(),
        _ => t,
    }
}

/// Triple-backtick fences paired greedily in line order. The info string's first word
/// is the tag (`unknown` when absent). An unclosed trailing fence is dropped with a warning.
pub fn extract_blocks(text: &str) -> Extraction {
    let mut out = Extraction::default();
    let mut open: Option<(usize, String, Vec<&str>)> = None;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_start();
        match open.take() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    let tag = info.split_whitespace().next().map_or_else(|| UNKNOWN_TAG.to_string(), canonical_tag);
                    open = Some((i, tag, Vec::new()));
                }
            }
            Some((start, tag, mut body)) => {
                if trimmed.starts_with("```") {
                    out.blocks.push(CodeBlock { language: tag, snippet: body.join("\n") });
                } else {
                    body.push(line);
                    open = Some((start, tag, body));
                }
            }
        }
    }
    if let Some((start, _, _)) = open {
        out.warnings.push(format!("unclosed fence opened at line {}", start + 1));
    }
    out
}

pub fn extract_code_blocks(text: &str) -> Vec<(String, String)> {
    extract_blocks(text).blocks.into_iter().map(|b| (b.language, b.snippet)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum StaticCheck {
    Ok,
    Reject { error_nodes: usize },
    Unsupported,
}

pub fn static_check(snippet: &str, language: &str, parser: &mut dyn GrammarParser) -> StaticCheck {
    if !parser.supports(language) {
        return StaticCheck::Unsupported;
    }
    match parser.analyze(language, snippet) {
        Ok(s) if s.is_clean() => StaticCheck::Ok,
        Ok(s) => StaticCheck::Reject { error_nodes: s.error_nodes },
        Err(_) => StaticCheck::Unsupported,
    }
}

const KEYWORDS: &[(&str, &[&str])] = &[
    ("python", &["def", "import", "elif", "self", "none", "lambda", "print"]),
    ("javascript", &["function", "const", "let", "var", "console", "undefined", "require"]),
    ("java", &["public", "static", "void", "class", "new", "extends", "system"]),
    ("cpp", &["include", "std", "cout", "namespace", "template", "int", "nullptr"]),
    ("rust", &["fn", "let", "mut", "impl", "pub", "struct", "match"]),
    ("go", &["func", "package", "fmt", "chan", "defer", "go", "struct"]),
    ("shell", &["echo", "fi", "then", "esac", "done", "export", "sudo"]),
];

/// Fraction of words that are keywords of some language.
pub const KEYWORD_DENSITY_THRESHOLD: f64 = 0.15;

/// Keyword-density guess; `None` when no language clears the threshold.
pub fn guess_language(text: &str) -> Option<&'static str> {
    let words: Vec<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return None;
    }
    let mut best: Option<(&'static str, usize)> = None;
    for (lang, kws) in KEYWORDS {
        let hits = words.iter().filter(|w| kws.contains(&w.as_str())).count();
        if best.is_none_or(|(_, b)| hits > b) {
            best = Some((lang, hits));
        }
    }
    let (lang, hits) = best?;
    (hits as f64 / words.len() as f64 >= KEYWORD_DENSITY_THRESHOLD).then_some(lang)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub code_blocks: Vec<CodeBlock>,
    #[serde(default)]
    pub language_label: String,
}

impl InstructionSample {
    /// Extracts blocks from the question and the answer separately and labels the sample.
    pub fn new(sample_id: &str, question: &str, answer: &str) -> Self {
        let mut s = InstructionSample {
            sample_id: sample_id.into(),
            question: question.into(),
            answer: answer.into(),
            code_blocks: Vec::new(),
            language_label: String::new(),
        };
        s.refresh();
        s
    }

    pub fn refresh(&mut self) {
        let q = extract_blocks(&self.question);
        let a = extract_blocks(&self.answer);
        for w in q.warnings.iter().chain(&a.warnings) {
            log::warn!("{}: {w}", self.sample_id);
        }
        self.code_blocks = q.blocks.into_iter().chain(a.blocks).collect();
        self.language_label = classify_language(self);
    }
}

/// Majority tag over code blocks (untagged blocks are guessed from their keywords);
/// ties go to the tag seen first. Without blocks, a keyword-dense text is labelled with
/// its guessed language, anything else is "No Programming Language".
pub fn classify_language(sample: &InstructionSample) -> String {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for b in &sample.code_blocks {
        let tag = if b.language == UNKNOWN_TAG {
            guess_language(&b.snippet).unwrap_or(UNKNOWN_TAG).to_string()
        } else {
            b.language.clone()
        };
        match counts.iter_mut().find(|(t, _)| *t == tag) {
            Some((_, n)) => *n += 1,
            None => counts.push((tag, 1)),
        }
    }
    if let Some(max) = counts.iter().map(|(_, n)| *n).max() {
        return counts.into_iter().find(|(_, n)| *n == max).map(|(t, _)| t).expect("max exists");
    }
    guess_language(&format!("{}\n{}", sample.question, sample.answer)).unwrap_or(NO_LANGUAGE).to_string()
}

pub fn checklist_score(scores: &[f64], weights: &[f64]) -> Result<f64, GateError> {
    if scores.len() != weights.len() {
        return Err(GateError::LengthMismatch { scores: scores.len(), weights: weights.len() });
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(GateError::BadWeight { index });
    }
    Ok(scores.iter().zip(weights).map(|(s, w)| s * w).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistScore {
    pub criteria: Vec<(String, f64)>,
    pub weights: Vec<f64>,
    pub total: f64,
}

/// External judgment scores keyed by `(sample_id, criterion)`.
#[derive(Debug, Clone, Default)]
pub struct ExternalScores(HashMap<(String, String), f64>);

#[derive(Deserialize)]
struct ScoreLine {
    sample_id: String,
    criterion: String,
    score: f64,
}

impl ExternalScores {
    pub fn insert(&mut self, sample_id: &str, criterion: &str, score: f64) -> Result<(), GateError> {
        if !CRITERIA.contains(&criterion) {
            return Err(GateError::UnknownCriterion(criterion.to_string()));
        }
        self.0.insert((sample_id.to_string(), criterion.to_string()), score);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let mut s = ExternalScores::default();
        for l in crate::jsonl::read::<ScoreLine>(path)? {
            s.insert(&l.sample_id, &l.criterion, l.score)?;
        }
        Ok(s)
    }

    pub fn get(&self, sample_id: &str, criterion: &str) -> Option<f64> {
        self.0.get(&(sample_id.to_string(), criterion.to_string())).copied()
    }
}

fn default_p() -> f64 {
    0.1
}
fn default_q() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_weights() -> Vec<f64> {
    vec![1.0; CRITERIA.len()]
}
fn default_score_max() -> f64 {
    10.0
}
fn default_mainstream() -> Vec<String> {
    MAINSTREAM.map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    /// Keep probability for samples labelled "No Programming Language".
    #[serde(default = "default_p")]
    pub no_code_keep: f64,
    /// Keep probability for samples in a language outside `mainstream`.
    #[serde(default = "default_q")]
    pub long_tail_keep: f64,
    #[serde(default)]
    pub min_total: Option<f64>,
    /// Drop samples with any block that fails to parse.
    #[serde(default = "default_true")]
    pub require_static: bool,
    #[serde(default = "default_weights")]
    pub weights: Vec<f64>,
    #[serde(default = "default_score_max")]
    pub score_max: f64,
    #[serde(default = "default_mainstream")]
    pub mainstream: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GatePolicy {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl GatePolicy {
    pub fn validate(&self) -> Result<(), GateError> {
        for (name, p) in [("no_code_keep", self.no_code_keep), ("long_tail_keep", self.long_tail_keep)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GateError::Policy(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.weights.len() != CRITERIA.len() {
            return Err(GateError::LengthMismatch { scores: CRITERIA.len(), weights: self.weights.len() });
        }
        checklist_score(&[0.0; 9], &self.weights).map(|_| ())
    }

    fn coin(&self, stage: &str, sample_id: &str, p: f64) -> bool {
        p >= 1.0 || keyed_rng(self.seed, stage, sample_id).random::<f64>() < p
    }
}

/// Checklist with the two code criteria computed natively and the rest taken from
/// `external` (absent scores count as zero). Correctness is the share of parseable
/// blocks among those with a supported grammar.
pub fn score_sample(
    sample: &InstructionSample,
    checks: &[StaticCheck],
    policy: &GatePolicy,
    external: &ExternalScores,
) -> Result<ChecklistScore, GateError> {
    let supported: Vec<&StaticCheck> = checks.iter().filter(|c| **c != StaticCheck::Unsupported).collect();
    let criteria: Vec<(String, f64)> = CRITERIA
        .iter()
        .map(|&c| {
            let s = match c {
                "code-exist" => {
                    if sample.code_blocks.is_empty() {
                        0.0
                    } else {
                        policy.score_max
                    }
                }
                "code-correctness" if !supported.is_empty() => {
                    let ok = supported.iter().filter(|c| ***c == StaticCheck::Ok).count();
                    policy.score_max * ok as f64 / supported.len() as f64
                }
                "code-correctness" => 0.0,
                _ => external.get(&sample.sample_id, c).unwrap_or(0.0),
            };
            (c.to_string(), s)
        })
        .collect();
    let scores: Vec<f64> = criteria.iter().map(|(_, s)| *s).collect();
    let total = checklist_score(&scores, &policy.weights)?;
    Ok(ChecklistScore { criteria, weights: policy.weights.clone(), total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedSample {
    #[serde(flatten)]
    pub sample: InstructionSample,
    pub checklist_total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDrop {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GateOutput {
    pub kept: Vec<GatedSample>,
    pub drops: Vec<GateDrop>,
}

fn gate_one(
    sample: &InstructionSample,
    parser: &mut dyn GrammarParser,
    policy: &GatePolicy,
    external: &ExternalScores,
) -> Result<Result<GatedSample, String>, GateError> {
    let mut sample = sample.clone();
    sample.refresh();
    let id = sample.sample_id.as_str();
    if sample.language_label == NO_LANGUAGE && !policy.coin("gate-no-code", id, policy.no_code_keep) {
        return Ok(Err("no-code".into()));
    }
    let checks: Vec<StaticCheck> =
        sample.code_blocks.iter().map(|b| static_check(&b.snippet, &b.language, parser)).collect();
    if policy.require_static && checks.iter().any(|c| matches!(c, StaticCheck::Reject { .. })) {
        return Ok(Err("static-check".into()));
    }
    let label = sample.language_label.as_str();
    if label != NO_LANGUAGE
        && !policy.mainstream.iter().any(|m| m == label)
        && !policy.coin("gate-long-tail", id, policy.long_tail_keep)
    {
        return Ok(Err("long-tail".into()));
    }
    let score = score_sample(&sample, &checks, policy, external)?;
    if policy.min_total.is_some_and(|m| score.total < m) {
        return Ok(Err("checklist-below-min".into()));
    }
    Ok(Ok(GatedSample { sample, checklist_total: score.total }))
}

/// Order-preserving, seed-deterministic gate. Checks run in order: no-code coin,
/// static parse, long-tail coin, checklist minimum; the first failure is the reason.
pub fn gate_instruction_corpus(
    samples: &[InstructionSample],
    policy: &GatePolicy,
    external: &ExternalScores,
) -> Result<GateOutput, GateError> {
    policy.validate()?;
    let results: Vec<_> = samples
        .par_iter()
        .map_init(TreeSitterParser::new, |parser, s| gate_one(s, parser, policy, external))
        .collect::<Result<_, _>>()?;
    let mut out = GateOutput::default();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(g) => out.kept.push(g),
            Err(reason) => out.drops.push(GateDrop { sample_id: s.sample_id.clone(), reason }),
        }
    }
    Ok(out)
}
