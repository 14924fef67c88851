//! Corpus units shared by every stage.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyed::stable_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Code,
    Math,
    Text,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Code, Domain::Math, Domain::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Code => "code",
            Domain::Math => "math",
            Domain::Text => "text",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "code" => Ok(Domain::Code),
            "text" => Ok(Domain::Text),
            "math" => Ok(Domain::Math),
            other => Err(format!("unknown domain `{other}` (expected code, text or math)")),
        }
    }
}

/// One ingested file.
///
/// Serialized as a manifest record; `content` travels with the record so that a
/// manifest is a self-contained handoff between stages. Skipped files appear with a
/// `drop_reason` and no content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub repo: String,
    pub path: String,
    pub language: String,
    pub byte_len: usize,
    pub line_count: usize,
    pub domain: Domain,
    pub quality_stage: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<String>,
    #[serde(default)]
    pub content: String,
}

impl SourceDocument {
    pub fn new(repo: &str, path: &str, language: &str, domain: Domain, content: String) -> Self {
        SourceDocument {
            doc_id: doc_id(repo, path, &content),
            repo: repo.to_string(),
            path: path.to_string(),
            language: language.to_string(),
            byte_len: content.len(),
            line_count: line_count(&content),
            domain,
            quality_stage: 0,
            drop_reason: None,
            content,
        }
    }

    pub fn is_dropped(&self) -> bool {
        self.drop_reason.is_some()
    }
}

pub fn doc_id(repo: &str, path: &str, content: &str) -> String {
    stable_id(&[repo.as_bytes(), path.as_bytes(), content.as_bytes()])
}

/// Lines as an editor counts them: a trailing newline does not open a new line.
pub fn line_count(content: &str) -> usize {
    content.lines().count()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("file `{path}` belongs to repo `{found}`, bundle is `{expected}`")]
    ForeignFile { path: String, found: String, expected: String },
    #[error("duplicate path `{0}` in bundle")]
    DuplicatePath(String),
}

/// All files of one repository, in packing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoBundle {
    pub repo_name: String,
    pub files: Vec<SourceDocument>,
}

impl RepoBundle {
    pub fn new(repo_name: &str, files: Vec<SourceDocument>) -> Result<Self, BundleError> {
        let mut seen = HashSet::new();
        for f in &files {
            if f.repo != repo_name {
                return Err(BundleError::ForeignFile {
                    path: f.path.clone(),
                    found: f.repo.clone(),
                    expected: repo_name.to_string(),
                });
            }
            if !seen.insert(f.path.as_str()) {
                return Err(BundleError::DuplicatePath(f.path.clone()));
            }
        }
        Ok(RepoBundle { repo_name: repo_name.to_string(), files })
    }

    /// Groups documents by repo, keeping first-seen repo order and document order.
    pub fn group(docs: impl IntoIterator<Item = SourceDocument>) -> Result<Vec<RepoBundle>, BundleError> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: std::collections::HashMap<String, Vec<SourceDocument>> = Default::default();
        for d in docs {
            if !groups.contains_key(&d.repo) {
                order.push(d.repo.clone());
            }
            groups.entry(d.repo.clone()).or_default().push(d);
        }
        order
            .into_iter()
            .map(|name| {
                let files = groups.remove(&name).unwrap_or_default();
                RepoBundle::new(&name, files)
            })
            .collect()
    }
}
