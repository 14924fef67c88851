//! Fill-in-the-middle sample construction and the file-level FIM text format.
//!
//! Rendered form (prefix-suffix-middle order):
//!
//! ```text
//! <|fim_prefix|>{prefix}<|fim_suffix|>{suffix}<|fim_middle|>{middle}<|endoftext|>
//! ```
//!
//! Documents that are not transformed render as `{content}<|endoftext|>`.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::SourceDocument;
use crate::keyed::keyed_rng;
use crate::sentinel::{find_sentinel_collisions, Sentinel, END_OF_TEXT, FIM_MIDDLE, FIM_PREFIX, FIM_SUFFIX};
use crate::syntax::{GrammarParser, SyntaxError, TreeSitterParser};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FimError {
    #[error("{field} contains sentinel {} at byte {offset}", .sentinel.surface())]
    SentinelCollision { field: &'static str, sentinel: Sentinel, offset: usize },
    #[error("expected {expected} at byte {offset}")]
    Expected { expected: &'static str, offset: usize },
    #[error("unexpected sentinel {} at byte {offset}", .sentinel.surface())]
    UnexpectedSentinel { sentinel: Sentinel, offset: usize },
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("invalid span policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanOrigin {
    RandomSpan,
    AstBlock,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpanPolicy {
    pub fim_rate: f64,
    pub min_middle_chars: usize,
    pub max_middle_fraction: f64,
    pub seed: u64,
}

impl Default for SpanPolicy {
    fn default() -> Self {
        SpanPolicy { fim_rate: 0.5, min_middle_chars: 1, max_middle_fraction: 0.5, seed: 0 }
    }
}

impl SpanPolicy {
    pub fn validate(&self) -> Result<(), FimError> {
        if !(0.0..=1.0).contains(&self.fim_rate) {
            return Err(FimError::Policy(format!("fim_rate {} outside [0, 1]", self.fim_rate)));
        }
        if self.min_middle_chars == 0 {
            return Err(FimError::Policy("min_middle_chars must be at least 1".into()));
        }
        if !(self.max_middle_fraction > 0.0 && self.max_middle_fraction <= 1.0) {
            return Err(FimError::Policy(format!(
                "max_middle_fraction {} outside (0, 1]",
                self.max_middle_fraction
            )));
        }
        Ok(())
    }

    /// Seeded coin for "transform this document at all".
    pub fn wants_fim(&self, key: &str) -> bool {
        self.fim_rate >= 1.0 || keyed_rng(self.seed, "fim-rate", key).random::<f64>() < self.fim_rate
    }

    /// Inclusive range of legal middle lengths (in chars) for a document of `n` chars.
    pub fn middle_len_bounds(&self, n: usize) -> Option<(usize, usize)> {
        let max = (self.max_middle_fraction * n as f64).floor() as usize;
        (n >= self.min_middle_chars && max >= self.min_middle_chars).then_some((self.min_middle_chars, max))
    }
}

/// The three spans of a sample as they appear in rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FimParts {
    pub prefix: String,
    pub middle: String,
    pub suffix: String,
    pub plain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimSample {
    pub doc_id: String,
    pub origin: SpanOrigin,
    pub prefix: String,
    pub middle: String,
    pub suffix: String,
    /// Set when AST selection fell back to a random span, with the reason.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl FimSample {
    pub fn plain(doc_id: &str, content: &str) -> Self {
        FimSample {
            doc_id: doc_id.to_string(),
            origin: SpanOrigin::Plain,
            prefix: content.to_string(),
            middle: String::new(),
            suffix: String::new(),
            fallback: None,
        }
    }

    fn split(doc_id: &str, content: &str, origin: SpanOrigin, start: usize, end: usize) -> Self {
        FimSample {
            doc_id: doc_id.to_string(),
            origin,
            prefix: content[..start].to_string(),
            middle: content[start..end].to_string(),
            suffix: content[end..].to_string(),
            fallback: None,
        }
    }

    pub fn is_plain(&self) -> bool {
        self.origin == SpanOrigin::Plain
    }

    pub fn reconstruct(&self) -> String {
        format!("{}{}{}", self.prefix, self.middle, self.suffix)
    }

    pub fn parts(&self) -> FimParts {
        FimParts {
            prefix: self.prefix.clone(),
            middle: self.middle.clone(),
            suffix: self.suffix.clone(),
            plain: self.is_plain(),
        }
    }
}

/// Picks a random middle span of legal length, or returns `None` when the document
/// is not selected for FIM or has no legal split. Offsets are byte offsets on char
/// boundaries; every legal `(start, end)` pair is equally likely.
pub fn random_split(content: &str, key: &str, policy: &SpanPolicy) -> Option<(usize, usize)> {
    if !policy.wants_fim(key) {
        return None;
    }
    random_split_forced(content, key, policy)
}

fn random_split_forced(content: &str, key: &str, policy: &SpanPolicy) -> Option<(usize, usize)> {
    let n = content.chars().count();
    let (lo, hi) = policy.middle_len_bounds(n)?;
    let total: u64 = (lo..=hi).map(|len| (n - len + 1) as u64).sum();
    let mut k = keyed_rng(policy.seed, "fim-span", key).random_range(0..total);
    let mut len = lo;
    loop {
        let starts = (n - len + 1) as u64;
        if k < starts {
            break;
        }
        k -= starts;
        len += 1;
    }
    let start_char = k as usize;
    let end_char = start_char + len;
    Some((char_to_byte(content, start_char), char_to_byte(content, end_char)))
}

fn char_to_byte(s: &str, char_idx: usize) -> usize {
    s.char_indices().nth(char_idx).map_or(s.len(), |(b, _)| b)
}

pub fn select_span_random(doc: &SourceDocument, policy: &SpanPolicy) -> FimSample {
    match random_split(&doc.content, &doc.doc_id, policy) {
        Some((s, e)) => FimSample::split(&doc.doc_id, &doc.content, SpanOrigin::RandomSpan, s, e),
        None => FimSample::plain(&doc.doc_id, &doc.content),
    }
}

/// Middle = one basic logic block chosen uniformly from all candidate nodes at every
/// nesting level. Falls back to a random span when the parse has errors or yields
/// no candidates.
pub fn select_span_ast(
    doc: &SourceDocument,
    parser: &mut dyn GrammarParser,
    policy: &SpanPolicy,
) -> Result<FimSample, FimError> {
    if !parser.supports(&doc.language) {
        return Err(SyntaxError::Unsupported(doc.language.clone()).into());
    }
    if !policy.wants_fim(&doc.doc_id) {
        return Ok(FimSample::plain(&doc.doc_id, &doc.content));
    }
    let reason = match parser.analyze(&doc.language, &doc.content) {
        Ok(summary) if !summary.is_clean() => "parse-error",
        Ok(summary) if summary.blocks.is_empty() => "no-candidates",
        Ok(summary) => {
            let pick = keyed_rng(policy.seed, "fim-ast", &doc.doc_id).random_range(0..summary.blocks.len());
            let r = summary.blocks[pick].range.clone();
            return Ok(FimSample::split(&doc.doc_id, &doc.content, SpanOrigin::AstBlock, r.start, r.end));
        }
        Err(SyntaxError::Unsupported(l)) => return Err(SyntaxError::Unsupported(l).into()),
        Err(SyntaxError::NoTree(_)) => "parse-error",
    };
    let mut sample = match random_split_forced(&doc.content, &doc.doc_id, policy) {
        Some((s, e)) => FimSample::split(&doc.doc_id, &doc.content, SpanOrigin::RandomSpan, s, e),
        None => FimSample::plain(&doc.doc_id, &doc.content),
    };
    sample.fallback = Some(reason.to_string());
    Ok(sample)
}

fn check_field(field: &'static str, text: &str) -> Result<(), FimError> {
    match find_sentinel_collisions(text).first() {
        Some(&(sentinel, offset)) => Err(FimError::SentinelCollision { field, sentinel, offset }),
        None => Ok(()),
    }
}

/// Appends the PSM triplet (including the end token) to `out`.
pub(crate) fn push_psm(out: &mut String, prefix: &str, middle: &str, suffix: &str) {
    out.push_str(FIM_PREFIX);
    out.push_str(prefix);
    out.push_str(FIM_SUFFIX);
    out.push_str(suffix);
    out.push_str(FIM_MIDDLE);
    out.push_str(middle);
    out.push_str(END_OF_TEXT);
}

pub fn render_parts(parts: &FimParts) -> Result<String, FimError> {
    check_field("prefix", &parts.prefix)?;
    if parts.plain {
        if !parts.middle.is_empty() || !parts.suffix.is_empty() {
            return Err(FimError::Policy("plain sample with non-empty middle or suffix".into()));
        }
        return Ok(format!("{}{END_OF_TEXT}", parts.prefix));
    }
    check_field("middle", &parts.middle)?;
    check_field("suffix", &parts.suffix)?;
    let mut out = String::with_capacity(parts.prefix.len() + parts.middle.len() + parts.suffix.len() + 64);
    push_psm(&mut out, &parts.prefix, &parts.middle, &parts.suffix);
    Ok(out)
}

pub fn render_file_fim(sample: &FimSample) -> Result<String, FimError> {
    render_parts(&sample.parts())
}

fn first_sentinel(text: &str, base: usize) -> Option<(Sentinel, usize)> {
    find_sentinel_collisions(text).first().map(|&(s, o)| (s, o + base))
}

/// Inverse of [`render_file_fim`].
pub fn parse_file_fim(text: &str) -> Result<FimParts, FimError> {
    let Some(rest) = text.strip_prefix(FIM_PREFIX) else {
        if let Some((s, o)) = first_sentinel(text, 0) {
            if matches!(s, Sentinel::FimSuffix | Sentinel::FimMiddle | Sentinel::FimPrefix) {
                return Err(FimError::Expected { expected: FIM_PREFIX, offset: 0 });
            }
            if s != Sentinel::EndOfText || o + END_OF_TEXT.len() != text.len() {
                return Err(FimError::UnexpectedSentinel { sentinel: s, offset: o });
            }
        }
        let body = text
            .strip_suffix(END_OF_TEXT)
            .ok_or(FimError::Expected { expected: END_OF_TEXT, offset: text.len() })?;
        return Ok(FimParts { prefix: body.to_string(), middle: String::new(), suffix: String::new(), plain: true });
    };

    let mut offset = FIM_PREFIX.len();
    let take = |rest: &str, marker: &'static str, offset: &mut usize| -> Result<(String, usize), FimError> {
        let Some(pos) = rest.find(marker) else {
            return Err(FimError::Expected { expected: marker, offset: *offset + rest.len() });
        };
        let field = &rest[..pos];
        if let Some((s, o)) = first_sentinel(field, *offset) {
            return match s {
                Sentinel::FimPrefix | Sentinel::FimSuffix | Sentinel::FimMiddle | Sentinel::EndOfText => {
                    Err(FimError::Expected { expected: marker, offset: o })
                }
                _ => Err(FimError::UnexpectedSentinel { sentinel: s, offset: o }),
            };
        }
        let consumed = pos + marker.len();
        *offset += consumed;
        Ok((field.to_string(), consumed))
    };
    let (prefix, used) = take(rest, FIM_SUFFIX, &mut offset)?;
    let rest = &rest[used..];
    let (suffix, used) = take(rest, FIM_MIDDLE, &mut offset)?;
    let rest = &rest[used..];
    let (middle, used) = take(rest, END_OF_TEXT, &mut offset)?;
    if used != rest.len() {
        return Err(FimError::Expected { expected: "end of input", offset });
    }
    Ok(FimParts { prefix, middle, suffix, plain: false })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimRecord {
    pub doc_id: String,
    pub origin: SpanOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub doc_id: String,
    pub reason: String,
}

/// Builds file-level samples for a corpus.
///
/// Documents whose language is in `ast_langs` (and has a grammar) use AST-block
/// selection; others use random spans. Documents containing sentinel strings are
/// dropped. Output is sorted by `doc_id`.
pub fn build_file_fim(
    docs: &[SourceDocument],
    policy: &SpanPolicy,
    ast_langs: &BTreeSet<String>,
) -> Result<(Vec<FimRecord>, Vec<DropRecord>), FimError> {
    policy.validate()?;
    let results: Vec<Result<FimRecord, DropRecord>> = docs
        .par_iter()
        .map_init(TreeSitterParser::new, |parser, doc| {
            if let Some(&(s, o)) = find_sentinel_collisions(&doc.content).first() {
                log::warn!("dropping {}: sentinel {} at byte {o}", doc.doc_id, s.surface());
                return Err(DropRecord { doc_id: doc.doc_id.clone(), reason: "sentinel-collision".into() });
            }
            let sample = if ast_langs.contains(&doc.language) && parser.supports(&doc.language) {
                select_span_ast(doc, parser, policy).unwrap_or_else(|_| select_span_random(doc, policy))
            } else {
                select_span_random(doc, policy)
            };
            let rendered = render_file_fim(&sample).expect("collision-free document renders");
            Ok(FimRecord { doc_id: sample.doc_id, origin: sample.origin, fallback: sample.fallback, rendered })
        })
        .collect();
    let mut records = Vec::new();
    let mut drops = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(d) => drops.push(d),
        }
    }
    records.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    drops.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok((records, drops))
}
