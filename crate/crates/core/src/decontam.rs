//! Word-level n-gram decontamination against benchmark test sets.
//!
//! Test documents are normalized into words and every window of `n` consecutive
//! words is fingerprinted with a polynomial rolling hash. Training documents are
//! scanned in linear time; each hash hit is confirmed by comparing the actual words,
//! so reported matches are exact.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::document::SourceDocument;

pub const DEFAULT_N: usize = 10;

const ROLL_BASE: u64 = 0x100_0000_01b3 | 1;

/// Lowercased maximal runs of letters, digits and `_`.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub type WordHasher = fn(&str) -> u64;

/// FNV-1a over the word's bytes.
pub fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

struct Window {
    doc: usize,
    offset: usize,
    benchmarks: BTreeSet<usize>,
}

struct TestDoc {
    words: Vec<String>,
}

pub struct NGramIndex {
    n: usize,
    word_hash: WordHasher,
    benchmarks: Vec<String>,
    docs: Vec<TestDoc>,
    buckets: HashMap<u64, Vec<Window>>,
    windows: usize,
}

/// Rolling hashes of every `n`-word window, in order.
fn window_hashes(words: &[String], n: usize, word_hash: WordHasher) -> Vec<u64> {
    if n == 0 || words.len() < n {
        return Vec::new();
    }
    let hs: Vec<u64> = words.iter().map(|w| word_hash(w)).collect();
    let top = (1..n).fold(1u64, |acc, _| acc.wrapping_mul(ROLL_BASE));
    let mut h = hs[..n].iter().fold(0u64, |acc, &x| acc.wrapping_mul(ROLL_BASE).wrapping_add(x));
    let mut out = Vec::with_capacity(words.len() - n + 1);
    out.push(h);
    for i in n..hs.len() {
        h = h.wrapping_sub(hs[i - n].wrapping_mul(top)).wrapping_mul(ROLL_BASE).wrapping_add(hs[i]);
        out.push(h);
    }
    out
}

impl NGramIndex {
    pub fn new(n: usize) -> Self {
        Self::with_word_hasher(n, fnv1a)
    }

    /// Index with a custom per-word hash (mainly useful for exercising collisions).
    pub fn with_word_hasher(n: usize, word_hash: WordHasher) -> Self {
        assert!(n >= 1, "n-gram length must be at least 1");
        NGramIndex { n, word_hash, benchmarks: Vec::new(), docs: Vec::new(), buckets: HashMap::new(), windows: 0 }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of distinct word windows indexed.
    pub fn len(&self) -> usize {
        self.windows
    }

    pub fn is_empty(&self) -> bool {
        self.windows == 0
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = u64> + '_ {
        self.buckets.keys().copied()
    }

    /// Benchmarks owning windows with this fingerprint.
    pub fn sources(&self, fingerprint: u64) -> BTreeSet<&str> {
        self.buckets
            .get(&fingerprint)
            .into_iter()
            .flatten()
            .flat_map(|w| w.benchmarks.iter().map(|&b| self.benchmarks[b].as_str()))
            .collect()
    }

    fn benchmark_index(&mut self, name: &str) -> usize {
        match self.benchmarks.iter().position(|b| b == name) {
            Some(i) => i,
            None => {
                self.benchmarks.push(name.to_string());
                self.benchmarks.len() - 1
            }
        }
    }

    pub fn add(&mut self, benchmark: &str, text: &str) {
        let words = normalize_words(text);
        if words.len() < self.n {
            return;
        }
        let bench = self.benchmark_index(benchmark);
        let doc = self.docs.len();
        let hashes = window_hashes(&words, self.n, self.word_hash);
        self.docs.push(TestDoc { words });
        for (offset, h) in hashes.into_iter().enumerate() {
            let slot = self.buckets.entry(h).or_default();
            let window = &self.docs[doc].words[offset..offset + self.n];
            let existing = slot.iter_mut().find(|w| self.docs[w.doc].words[w.offset..w.offset + self.n] == *window);
            match existing {
                Some(w) => {
                    w.benchmarks.insert(bench);
                }
                None => {
                    slot.push(Window { doc, offset, benchmarks: BTreeSet::from([bench]) });
                    self.windows += 1;
                }
            }
        }
    }

    pub fn build<'a>(n: usize, docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut idx = NGramIndex::new(n);
        for (bench, text) in docs {
            idx.add(bench, text);
        }
        idx
    }

    /// Verified matches for one word sequence: `(benchmark, word offset)`, ascending.
    fn matches_in(&self, words: &[String]) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (offset, h) in window_hashes(words, self.n, self.word_hash).into_iter().enumerate() {
            let Some(slot) = self.buckets.get(&h) else { continue };
            let window = &words[offset..offset + self.n];
            for w in slot {
                if self.docs[w.doc].words[w.offset..w.offset + self.n] == *window {
                    out.extend(w.benchmarks.iter().map(|&b| (self.benchmarks[b].clone(), offset)));
                }
            }
        }
        out
    }
}

/// Unlabelled test documents under a single benchmark name.
pub fn build_index(test_docs: &[&str], n: usize) -> NGramIndex {
    NGramIndex::build(n, test_docs.iter().map(|t| ("test", *t)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationMatch {
    pub benchmark: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub doc_id: String,
    pub matches: Vec<ContaminationMatch>,
}

impl DecontamReport {
    pub fn flagged(&self) -> bool {
        !self.matches.is_empty()
    }
}

pub fn scan_text(doc_id: &str, text: &str, index: &NGramIndex) -> DecontamReport {
    let matches = index
        .matches_in(&normalize_words(text))
        .into_iter()
        .map(|(benchmark, offset)| ContaminationMatch { benchmark, offset })
        .collect();
    DecontamReport { doc_id: doc_id.to_string(), matches }
}

pub fn scan(doc: &SourceDocument, index: &NGramIndex) -> DecontamReport {
    scan_text(&doc.doc_id, &doc.content, index)
}

/// One removal log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub doc_id: String,
    pub benchmark: String,
    pub offset: usize,
}

/// Drops every document with at least one verified match; input order is preserved.
pub fn filter_corpus(docs: Vec<SourceDocument>, index: &NGramIndex) -> (Vec<SourceDocument>, Vec<RemovalRecord>) {
    let reports: Vec<DecontamReport> = docs.par_iter().map(|d| scan(d, index)).collect();
    let mut clean = Vec::with_capacity(docs.len());
    let mut log = Vec::new();
    for (doc, report) in docs.into_iter().zip(reports) {
        if report.flagged() {
            log.extend(report.matches.into_iter().map(|m| RemovalRecord {
                doc_id: report.doc_id.clone(),
                benchmark: m.benchmark,
                offset: m.offset,
            }));
        } else {
            clean.push(doc);
        }
    }
    (clean, log)
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
}

/// Reads benchmark test sets from a directory, sorted by file name. `*.jsonl` files
/// contribute one document per line (`text` field); any other file is one document.
/// The benchmark name is the file stem.
pub fn load_test_sets(dir: &Path) -> io::Result<Vec<(String, String)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if p.extension().is_some_and(|e| e == "jsonl") {
            for rec in crate::jsonl::read::<TextRecord>(&p)? {
                out.push((name.clone(), rec.text));
            }
        } else {
            out.push((name, fs::read_to_string(&p)?));
        }
    }
    Ok(out)
}
