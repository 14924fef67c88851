//! Repository-level sequence packing.
//!
//! A packed sequence looks like
//!
//! ```text
//! <|repo_name|>{repo}
//! <|file_sep|>{path_1}
//! {content_1}
//! <|file_sep|>{path_2}
//! {content_2}<|endoftext|>
//! ```
//!
//! Exactly one `\n` always separates a file's content from the next `<|file_sep|>`,
//! so the content of every file is recoverable byte for byte. When the last file is a
//! FIM target its content is replaced by the prefix/suffix/middle triplet, which
//! carries its own end token.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::TokenBudgeter;
use crate::document::{RepoBundle, SourceDocument};
use crate::fim::{parse_file_fim, push_psm, random_split, FimError, FimParts, SpanPolicy};
use crate::sentinel::{contains_sentinel, END_OF_TEXT, FILE_SEP, FIM_PREFIX, REPO_NAME};

/// File-level pretraining sequence length.
pub const FILE_STAGE_BUDGET: usize = 8_192;
/// Repo-level pretraining sequence length.
pub const REPO_STAGE_BUDGET: usize = 32_768;
/// Longest sequence the extended context is expected to handle.
pub const MAX_CONTEXT_BUDGET: usize = 131_072;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("repository `{0}` has no files")]
    EmptyBundle(String),
    #[error("budget {budget} cannot hold the header for `{path}` ({needed} tokens)")]
    HeaderOverflow { path: String, budget: usize, needed: usize },
    #[error("`{0}` is not the last file of its sequence")]
    TargetNotLast(String),
    #[error("`{0}` is not in the bundle")]
    UnknownTarget(String),
    #[error("FIM rendering of `{path}` needs {needed} tokens, budget is {budget}")]
    BudgetExceeded { path: String, budget: usize, needed: usize },
    #[error("invalid repo name or path `{0}`")]
    InvalidName(String),
    #[error("malformed packed sequence: {0}")]
    Malformed(String),
    #[error(transparent)]
    Fim(#[from] FimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub repo_name: String,
    pub included_paths: Vec<String>,
    pub rendered: String,
    pub approx_tokens: usize,
    pub fim_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackWarning {
    pub repo: String,
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PackOutput {
    pub sequences: Vec<PackedSequence>,
    /// Truncated or skipped files.
    pub warnings: Vec<PackWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileOrder {
    #[default]
    PathLex,
    DependencyFirst,
}

/// A file as it enters a sequence: `(path, content)`.
type Entry<'a> = (&'a str, std::borrow::Cow<'a, str>);

fn valid_name(s: &str) -> bool {
    !s.contains('\n') && !contains_sentinel(s)
}

fn header(repo: &str) -> String {
    format!("{REPO_NAME}{repo}\n")
}

fn push_file(out: &mut String, path: &str, content: &str) {
    out.push_str(FILE_SEP);
    out.push_str(path);
    out.push('\n');
    out.push_str(content);
}

/// Renders one sequence. `fim_last` replaces the last file's content with the
/// given triplet.
pub fn render_repo_sequence(
    repo_name: &str,
    files: &[(&str, &str)],
    fim_last: Option<&FimParts>,
) -> Result<String, PackError> {
    if files.is_empty() {
        return Err(PackError::EmptyBundle(repo_name.to_string()));
    }
    if !valid_name(repo_name) {
        return Err(PackError::InvalidName(repo_name.to_string()));
    }
    let mut out = header(repo_name);
    let (last, init) = files.split_last().expect("non-empty");
    for (path, content) in init {
        if !valid_name(path) {
            return Err(PackError::InvalidName(path.to_string()));
        }
        push_file(&mut out, path, content);
        out.push('\n');
    }
    if !valid_name(last.0) {
        return Err(PackError::InvalidName(last.0.to_string()));
    }
    match fim_last {
        Some(parts) => {
            out.push_str(FILE_SEP);
            out.push_str(last.0);
            out.push('\n');
            // validates the spans against sentinels
            crate::fim::render_parts(parts)?;
            push_psm(&mut out, &parts.prefix, &parts.middle, &parts.suffix);
        }
        None => {
            push_file(&mut out, last.0, last.1);
            out.push_str(END_OF_TEXT);
        }
    }
    Ok(out)
}

struct Open<'a> {
    body: String,
    entries: Vec<Entry<'a>>,
}

impl<'a> Open<'a> {
    fn new(repo: &str) -> Self {
        Open { body: header(repo), entries: Vec::new() }
    }

    fn with(&self, path: &str, content: &str) -> String {
        let mut s = String::with_capacity(self.body.len() + path.len() + content.len() + 32);
        s.push_str(&self.body);
        if !self.entries.is_empty() {
            s.push('\n');
        }
        push_file(&mut s, path, content);
        s.push_str(END_OF_TEXT);
        s
    }

    fn push(&mut self, path: &'a str, content: std::borrow::Cow<'a, str>) {
        if !self.entries.is_empty() {
            self.body.push('\n');
        }
        // body always ends with the header newline or a separator newline
        push_file(&mut self.body, path, &content);
        self.entries.push((path, content));
    }

    fn close(self, repo: &str, budgeter: &TokenBudgeter) -> PackedSequence {
        let mut rendered = self.body;
        rendered.push_str(END_OF_TEXT);
        PackedSequence {
            repo_name: repo.to_string(),
            included_paths: self.entries.iter().map(|(p, _)| p.to_string()).collect(),
            approx_tokens: budgeter.count(&rendered),
            rendered,
            fim_applied: false,
        }
    }
}

/// Largest line-prefix of `content` whose single-file sequence fits the budget.
fn truncate_to_fit<'a>(
    open: &Open<'_>,
    path: &str,
    content: &'a str,
    budget: usize,
    budgeter: &TokenBudgeter,
) -> Option<&'a str> {
    let cuts: Vec<usize> = std::iter::once(0)
        .chain(content.split_inclusive('\n').scan(0, |acc, l| {
            *acc += l.len();
            Some(*acc)
        }))
        .collect();
    let fits = |i: usize| budgeter.count(&open.with(path, &content[..cuts[i]])) <= budget;
    if !fits(0) {
        return None;
    }
    let (mut lo, mut hi) = (0, cuts.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(&content[..cuts[lo]])
}

/// Greedy packing in bundle order. A file that does not fit starts a new sequence;
/// a file too large for an empty sequence is cut at a line boundary.
pub fn pack_repo(bundle: &RepoBundle, budget: usize, budgeter: &TokenBudgeter) -> Result<PackOutput, PackError> {
    let repo = bundle.repo_name.as_str();
    if bundle.files.is_empty() {
        return Err(PackError::EmptyBundle(repo.to_string()));
    }
    if !valid_name(repo) {
        return Err(PackError::InvalidName(repo.to_string()));
    }
    let mut out = PackOutput::default();
    let warn = |out: &mut PackOutput, path: &str, reason: &str| {
        log::warn!("{repo}/{path}: {reason}");
        out.warnings.push(PackWarning { repo: repo.to_string(), path: path.to_string(), reason: reason.to_string() });
    };
    let mut open = Open::new(repo);
    for file in &bundle.files {
        let path = file.path.as_str();
        if !valid_name(path) {
            warn(&mut out, path, "invalid-path");
            continue;
        }
        if contains_sentinel(&file.content) {
            warn(&mut out, path, "sentinel-collision");
            continue;
        }
        if budgeter.count(&open.with(path, &file.content)) <= budget {
            open.push(path, file.content.as_str().into());
            continue;
        }
        if !open.entries.is_empty() {
            let full = std::mem::replace(&mut open, Open::new(repo));
            out.sequences.push(full.close(repo, budgeter));
            if budgeter.count(&open.with(path, &file.content)) <= budget {
                open.push(path, file.content.as_str().into());
                continue;
            }
        }
        match truncate_to_fit(&open, path, &file.content, budget, budgeter) {
            Some(kept) => {
                warn(&mut out, path, &format!("truncated to {} of {} bytes", kept.len(), file.content.len()));
                open.push(path, kept.into());
            }
            None => {
                return Err(PackError::HeaderOverflow {
                    path: path.to_string(),
                    budget,
                    needed: budgeter.count(&open.with(path, "")),
                })
            }
        }
    }
    if !open.entries.is_empty() {
        out.sequences.push(open.close(repo, budgeter));
    }
    Ok(out)
}

fn contents_for(seq: &PackedSequence, bundle: &RepoBundle) -> Result<Vec<(String, String)>, PackError> {
    // Recover possibly-truncated contents from the rendering itself.
    let parsed = parse_repo_sequence(&seq.rendered)?;
    debug_assert!(parsed.files.iter().all(|(p, _)| bundle.files.iter().any(|f| &f.path == p)));
    Ok(parsed.files)
}

fn fim_split(key: &str, content: &str, policy: &SpanPolicy, forced: bool) -> Option<FimParts> {
    let policy = if forced { SpanPolicy { fim_rate: 1.0, ..policy.clone() } } else { policy.clone() };
    match random_split(content, key, &policy) {
        Some((s, e)) => Some(FimParts {
            prefix: content[..s].to_string(),
            middle: content[s..e].to_string(),
            suffix: content[e..].to_string(),
            plain: false,
        }),
        None if forced => Some(FimParts {
            prefix: content.to_string(),
            middle: String::new(),
            suffix: String::new(),
            plain: false,
        }),
        None => None,
    }
}

fn rerender_with_fim(
    seq: &PackedSequence,
    files: &[(String, String)],
    parts: &FimParts,
    budgeter: &TokenBudgeter,
) -> Result<PackedSequence, PackError> {
    let refs: Vec<(&str, &str)> = files.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
    let rendered = render_repo_sequence(&seq.repo_name, &refs, Some(parts))?;
    Ok(PackedSequence {
        repo_name: seq.repo_name.clone(),
        included_paths: seq.included_paths.clone(),
        approx_tokens: budgeter.count(&rendered),
        rendered,
        fim_applied: true,
    })
}

/// Packs the bundle and turns `target_path` into a FIM target. The target must end
/// up as the last file of its sequence.
pub fn render_repo_fim(
    bundle: &RepoBundle,
    target_path: &str,
    policy: &SpanPolicy,
    budgeter: &TokenBudgeter,
    budget: usize,
) -> Result<PackedSequence, PackError> {
    policy.validate()?;
    let target = bundle
        .files
        .iter()
        .find(|f| f.path == target_path)
        .ok_or_else(|| PackError::UnknownTarget(target_path.to_string()))?;
    let packed = pack_repo(bundle, budget, budgeter)?;
    let seq = packed
        .sequences
        .iter()
        .find(|s| s.included_paths.iter().any(|p| p == target_path))
        .ok_or_else(|| PackError::UnknownTarget(target_path.to_string()))?;
    if seq.included_paths.last().map(String::as_str) != Some(target_path) {
        return Err(PackError::TargetNotLast(target_path.to_string()));
    }
    let files = contents_for(seq, bundle)?;
    let content = &files.last().expect("non-empty sequence").1;
    let parts = fim_split(&target.doc_id, content, policy, true).expect("forced split");
    let fim = rerender_with_fim(seq, &files, &parts, budgeter)?;
    if fim.approx_tokens > budget {
        return Err(PackError::BudgetExceeded { path: target_path.to_string(), budget, needed: fim.approx_tokens });
    }
    Ok(fim)
}

/// [`pack_repo`] followed by seeded FIM conversion of each sequence's last file.
/// A conversion that would overflow the budget is skipped for that sequence.
pub fn pack_repo_fim_last(
    bundle: &RepoBundle,
    budget: usize,
    budgeter: &TokenBudgeter,
    policy: &SpanPolicy,
) -> Result<PackOutput, PackError> {
    policy.validate()?;
    let mut packed = pack_repo(bundle, budget, budgeter)?;
    let ids: HashMap<&str, &SourceDocument> = bundle.files.iter().map(|f| (f.path.as_str(), f)).collect();
    for seq in packed.sequences.iter_mut() {
        let last = seq.included_paths.last().expect("non-empty sequence");
        let key = &ids[last.as_str()].doc_id;
        let files = contents_for(seq, bundle)?;
        let content = &files.last().expect("non-empty").1;
        let Some(parts) = fim_split(key, content, policy, false) else { continue };
        let fim = rerender_with_fim(seq, &files, &parts, budgeter)?;
        if fim.approx_tokens <= budget {
            *seq = fim;
        }
    }
    Ok(packed)
}

/// Result of parsing a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRepoSequence {
    pub repo_name: String,
    /// `(path, content)`; a FIM target's content is reassembled as prefix+middle+suffix.
    pub files: Vec<(String, String)>,
    pub fim: Option<FimParts>,
}

pub fn parse_repo_sequence(text: &str) -> Result<ParsedRepoSequence, PackError> {
    let bad = |m: &str| PackError::Malformed(m.to_string());
    let rest = text.strip_prefix(REPO_NAME).ok_or_else(|| bad("missing <|repo_name|>"))?;
    let (repo_name, rest) = rest.split_once('\n').ok_or_else(|| bad("repo name not newline-terminated"))?;
    let rest = rest.strip_prefix(FILE_SEP).ok_or_else(|| bad("expected <|file_sep|> after repo name"))?;
    let segments: Vec<&str> = rest.split(FILE_SEP).collect();
    let (last, init) = segments.split_last().expect("split yields at least one item");
    let mut files = Vec::with_capacity(segments.len());
    for seg in init {
        let (path, content) = seg.split_once('\n').ok_or_else(|| bad("path not newline-terminated"))?;
        let content = content.strip_suffix('\n').ok_or_else(|| bad("missing separator newline"))?;
        files.push((path.to_string(), content.to_string()));
    }
    let (path, tail) = last.split_once('\n').ok_or_else(|| bad("path not newline-terminated"))?;
    let fim = if tail.starts_with(FIM_PREFIX) {
        let parts = parse_file_fim(tail)?;
        files.push((path.to_string(), format!("{}{}{}", parts.prefix, parts.middle, parts.suffix)));
        Some(parts)
    } else {
        let content = tail.strip_suffix(END_OF_TEXT).ok_or_else(|| bad("missing <|endoftext|>"))?;
        if contains_sentinel(content) {
            return Err(bad("sentinel inside file content"));
        }
        files.push((path.to_string(), content.to_string()));
        None
    };
    Ok(ParsedRepoSequence { repo_name: repo_name.to_string(), files, fim })
}

fn is_import_like(line: &str) -> bool {
    let t = line.trim_start();
    ["import ", "from ", "#include", "use ", "mod ", "require ", "using ", "package "]
        .iter()
        .any(|p| t.starts_with(p))
        || t.contains("require(")
        || t.contains("import(")
}

fn words(line: &str) -> HashSet<&str> {
    line.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|w| !w.is_empty()).collect()
}

fn stem(path: &str) -> &str {
    let name = path.rsplit('/').next().unwrap_or(path);
    match name.split_once('.') {
        Some((s, _)) if !s.is_empty() => s,
        _ => name,
    }
}

/// Dependency edges `(dependency, dependent)` by file index: file `j` depends on file
/// `i` when one of `j`'s import-like lines mentions `i`'s file stem as a word.
pub fn import_edges(files: &[SourceDocument]) -> Vec<(usize, usize)> {
    let mut by_stem: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, f) in files.iter().enumerate() {
        by_stem.entry(stem(&f.path)).or_default().push(i);
    }
    let mut edges = BTreeSet::new();
    for (j, f) in files.iter().enumerate() {
        for line in f.content.lines().filter(|l| is_import_like(l)) {
            for w in words(line) {
                for &i in by_stem.get(w).map(Vec::as_slice).unwrap_or(&[]) {
                    if i != j {
                        edges.insert((i, j));
                    }
                }
            }
        }
    }
    edges.into_iter().collect()
}

/// Reorders a bundle. Dependency-first emits a file once everything it imports has
/// been emitted, choosing the lexicographically smallest ready path; on a cycle the
/// smallest remaining path is emitted next.
pub fn order_files(bundle: &RepoBundle, order: FileOrder) -> RepoBundle {
    let mut files = bundle.files.clone();
    files.sort_by(|a, b| a.path.cmp(&b.path));
    if order == FileOrder::DependencyFirst {
        let n = files.len();
        let mut indeg = vec![0usize; n];
        let mut out_edges = vec![Vec::new(); n];
        for (i, j) in import_edges(&files) {
            indeg[j] += 1;
            out_edges[i].push(j);
        }
        // indices are already in path order, so the smallest index is the smallest path
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = match ready.pop_first() {
                Some(i) => i,
                None => (0..n).find(|&i| !done[i]).expect("remaining node"),
            };
            if done[next] {
                continue;
            }
            done[next] = true;
            order.push(next);
            for &j in &out_edges[next] {
                indeg[j] = indeg[j].saturating_sub(1);
                if indeg[j] == 0 && !done[j] {
                    ready.insert(j);
                }
            }
        }
        let mut slots: Vec<Option<SourceDocument>> = files.into_iter().map(Some).collect();
        files = order.into_iter().map(|i| slots[i].take().expect("each index once")).collect();
    }
    RepoBundle { repo_name: bundle.repo_name.clone(), files }
}
