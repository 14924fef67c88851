//! Directory ingestion and language tagging.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::document::{Domain, SourceDocument};

pub const DEFAULT_MAX_FILE_BYTES: u64 = 1 << 20;
const BINARY_SNIFF_BYTES: usize = 8 * 1024;
pub const UNKNOWN_LANGUAGE: &str = "unknown";

const DEFAULT_LANGUAGES: &str = include_str!("../data/languages.toml");

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read root `{path}`: {source}")]
    Root {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid language map: {0}")]
    LanguageMap(#[from] toml::de::Error),
}

/// Extension, filename and shebang tables for language tagging.
#[derive(Debug, Clone, Deserialize)]
pub struct LanguageMap {
    #[serde(default)]
    extensions: BTreeMap<String, String>,
    #[serde(default)]
    filenames: BTreeMap<String, String>,
    #[serde(default)]
    interpreters: BTreeMap<String, String>,
}

impl LanguageMap {
    pub fn from_toml(src: &str) -> Result<Self, IngestError> {
        let mut map: LanguageMap = toml::from_str(src)?;
        map.extensions = map
            .extensions
            .into_iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v))
            .collect();
        Ok(map)
    }

    pub fn builtin() -> &'static LanguageMap {
        static MAP: OnceLock<LanguageMap> = OnceLock::new();
        MAP.get_or_init(|| LanguageMap::from_toml(DEFAULT_LANGUAGES).expect("bundled language map parses"))
    }

    /// Distinct language tags the map can produce.
    pub fn languages(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .extensions
            .values()
            .chain(self.filenames.values())
            .chain(self.interpreters.values())
            .map(String::as_str)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn by_extension(&self, ext: &str) -> Option<&str> {
        self.extensions.get(&ext.to_ascii_lowercase()).map(String::as_str)
    }

    /// Extension map first, then exact filename, then shebang; else `"unknown"`.
    pub fn detect(&self, path: &str, content: &str) -> String {
        let file_name = path.rsplit('/').next().unwrap_or(path);
        if let Some((stem, ext)) = file_name.rsplit_once('.') {
            if !stem.is_empty() {
                if let Some(lang) = self.by_extension(ext) {
                    return lang.to_string();
                }
            }
        }
        if let Some(lang) = self.filenames.get(file_name) {
            return lang.clone();
        }
        if let Some(lang) = self.shebang(content) {
            return lang.to_string();
        }
        UNKNOWN_LANGUAGE.to_string()
    }

    fn shebang(&self, content: &str) -> Option<&str> {
        let first = content.lines().next()?.strip_prefix("#!")?;
        let mut words = first.split_whitespace();
        let mut cmd = words.next()?.rsplit('/').next()?;
        if cmd == "env" {
            cmd = words.find(|w| !w.starts_with('-'))?;
        }
        if let Some(lang) = self.interpreters.get(cmd) {
            return Some(lang);
        }
        // python3.11 and friends
        let base = cmd.trim_end_matches(|c: char| c.is_ascii_digit() || c == '.');
        self.interpreters.get(base).map(String::as_str)
    }
}

/// Language tag using the bundled map.
pub fn detect_language(path: &str, content: &str) -> String {
    LanguageMap::builtin().detect(path, content)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RepoNaming {
    /// Every file belongs to one repo with this name.
    Single(String),
    /// Each top-level directory under the root is a repository; paths are relative to it.
    TopLevelDirs,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub domain: Domain,
    pub max_file_bytes: u64,
    pub repos: RepoNaming,
}

impl IngestOptions {
    pub fn new(domain: Domain) -> Self {
        IngestOptions { domain, max_file_bytes: DEFAULT_MAX_FILE_BYTES, repos: RepoNaming::TopLevelDirs }
    }
}

/// Walks `root` and returns one record per regular file in lexicographic path order.
///
/// Files that are skipped (binary, oversize, unreadable) stay in the output with a
/// `drop_reason` so the manifest accounts for them; use [`kept`] for the document
/// stream proper.
pub fn ingest_directory(root: &Path, opts: &IngestOptions) -> Result<Vec<SourceDocument>, IngestError> {
    ingest_with_map(root, opts, LanguageMap::builtin())
}

pub fn ingest_with_map(
    root: &Path,
    opts: &IngestOptions,
    map: &LanguageMap,
) -> Result<Vec<SourceDocument>, IngestError> {
    let meta = fs::metadata(root).map_err(|source| IngestError::Root { path: root.to_path_buf(), source })?;
    if !meta.is_dir() {
        return Err(IngestError::Root {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        });
    }
    fs::read_dir(root).map_err(|source| IngestError::Root { path: root.to_path_buf(), source })?;

    let root_name = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "root".to_string());

    let mut files: Vec<(String, PathBuf)> = WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || e.file_name() != ".git")
        .filter_map(|e| match e {
            Ok(e) => Some(e),
            Err(err) => {
                log::warn!("skipping unreadable entry: {err}");
                None
            }
        })
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            let rel = e.path().strip_prefix(root).ok()?;
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Some((rel, e.into_path()))
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let docs = files
        .par_iter()
        .map(|(rel, full)| {
            let (repo, path) = match &opts.repos {
                RepoNaming::Single(name) => (name.clone(), rel.clone()),
                RepoNaming::TopLevelDirs => match rel.split_once('/') {
                    Some((repo, rest)) => (repo.to_string(), rest.to_string()),
                    None => (root_name.clone(), rel.clone()),
                },
            };
            load_file(full, &repo, &path, opts, map)
        })
        .collect();
    Ok(docs)
}

fn load_file(full: &Path, repo: &str, path: &str, opts: &IngestOptions, map: &LanguageMap) -> SourceDocument {
    let dropped = |reason: &str, size: u64| {
        log::warn!("skipping {repo}/{path}: {reason}");
        let mut d = SourceDocument::new(repo, path, UNKNOWN_LANGUAGE, opts.domain, String::new());
        d.byte_len = size as usize;
        d.line_count = 0;
        d.drop_reason = Some(reason.to_string());
        d
    };
    let size = match fs::metadata(full) {
        Ok(m) => m.len(),
        Err(_) => return dropped("unreadable", 0),
    };
    if size > opts.max_file_bytes {
        return dropped("oversize", size);
    }
    let mut bytes = Vec::with_capacity(size as usize);
    if fs::File::open(full).and_then(|mut f| f.read_to_end(&mut bytes)).is_err() {
        return dropped("unreadable", size);
    }
    if bytes[..bytes.len().min(BINARY_SNIFF_BYTES)].contains(&0) {
        return dropped("binary", size);
    }
    let content = match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    };
    let language = map.detect(path, &content);
    SourceDocument::new(repo, path, &language, opts.domain, content)
}

/// Documents that were not skipped at ingest.
pub fn kept(docs: impl IntoIterator<Item = SourceDocument>) -> impl Iterator<Item = SourceDocument> {
    docs.into_iter().filter(|d| !d.is_dropped())
}
