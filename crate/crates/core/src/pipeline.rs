//! End-to-end orchestration: one TOML config, one directory per stage, JSON-Lines
//! manifests plus content-addressed text shards, and stage stamps for resuming.
//!
//! Pretraining path: ingest → filter → decontam → fim / pack → mix.
//! Instruction path: gate. The needle grid is built from the decontaminated code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::budget::{BudgeterMode, TokenBudgeter};
use crate::decontam::{filter_corpus, load_test_sets, NGramIndex, DEFAULT_N};
use crate::document::{Domain, RepoBundle, SourceDocument};
use crate::filter::{run_cascade, CascadeConfig};
use crate::fim::{build_file_fim, FimRecord, SpanOrigin, SpanPolicy};
use crate::gate::{gate_instruction_corpus, ExternalScores, GatePolicy, InstructionSample};
use crate::ingest::{ingest_directory, kept, IngestOptions, RepoNaming, DEFAULT_MAX_FILE_BYTES};
use crate::jsonl;
use crate::keyed::sha256_hex;
use crate::mixture::{mixture_report, plan_mixture_with, sample_interleaved, DEFAULT_MAX_EPOCHS};
use crate::needle::{default_depths, generate_grid, NeedleSpec, DEFAULT_LENGTHS};
use crate::pack::{order_files, pack_repo, pack_repo_fim_last, FileOrder, PackWarning, REPO_STAGE_BUDGET};
use crate::sentinel::{contains_sentinel, END_OF_TEXT};

pub const WORKERS_ENV: &str = "CODEMILL_WORKERS";
const STAMP: &str = "stamp.json";
const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub ingest: bool,
    pub filter: bool,
    pub decontam: bool,
    pub fim: bool,
    pub pack: bool,
    pub mix: bool,
    pub gate: bool,
    pub needle: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            ingest: true,
            filter: true,
            decontam: true,
            fim: true,
            pack: true,
            mix: true,
            gate: false,
            needle: false,
        }
    }
}

impl StageToggles {
    pub fn none() -> Self {
        StageToggles {
            ingest: false,
            filter: false,
            decontam: false,
            fim: false,
            pack: false,
            mix: false,
            gate: false,
            needle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub path: PathBuf,
    pub domain: Domain,
    /// Treat the whole tree as one repository with this name instead of one
    /// repository per top-level directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo: Option<String>,
    #[serde(default = "default_max_file_bytes")]
    pub max_file_bytes: u64,
}

fn default_max_file_bytes() -> u64 {
    DEFAULT_MAX_FILE_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecontamSection {
    /// Directory of benchmark test sets; none means an empty index.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tests: Option<PathBuf>,
    pub n: usize,
}

impl Default for DecontamSection {
    fn default() -> Self {
        DecontamSection { tests: None, n: DEFAULT_N }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FimSection {
    pub rate: f64,
    pub min_middle_chars: usize,
    pub max_middle_fraction: f64,
    /// Languages whose middles are chosen from syntax-tree blocks.
    pub ast_langs: Vec<String>,
}

impl Default for FimSection {
    fn default() -> Self {
        let p = SpanPolicy::default();
        FimSection {
            rate: p.fim_rate,
            min_middle_chars: p.min_middle_chars,
            max_middle_fraction: p.max_middle_fraction,
            ast_langs: Vec::new(),
        }
    }
}

impl FimSection {
    pub fn policy(&self, seed: u64) -> SpanPolicy {
        SpanPolicy {
            fim_rate: self.rate,
            min_middle_chars: self.min_middle_chars,
            max_middle_fraction: self.max_middle_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackSection {
    pub budget: usize,
    pub order: FileOrder,
    pub fim_last: bool,
}

impl Default for PackSection {
    fn default() -> Self {
        PackSection { budget: REPO_STAGE_BUDGET, order: FileOrder::PathLex, fim_last: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSection {
    /// Domain name to weight; weights are normalized.
    pub targets: BTreeMap<String, f64>,
    pub max_epochs: f64,
}

impl Default for MixSection {
    fn default() -> Self {
        let targets = [("code", 0.7), ("text", 0.2), ("math", 0.1)].map(|(k, v)| (k.to_string(), v)).into();
        MixSection { targets, max_epochs: DEFAULT_MAX_EPOCHS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GateSection {
    /// JSON-Lines of `{sample_id, question, answer}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// JSON-Lines of `{sample_id, criterion, score}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    pub policy: GatePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub needle: Option<PathBuf>,
    pub language: String,
    pub depths: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl Default for NeedleSection {
    fn default() -> Self {
        NeedleSection {
            needle: None,
            language: "python".into(),
            depths: default_depths(),
            lengths: DEFAULT_LENGTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub budgeter: BudgeterMode,
    pub stages: StageToggles,
    pub inputs: Vec<InputSpec>,
    pub filter: CascadeConfig,
    pub decontam: DecontamSection,
    pub fim: FimSection,
    pub pack: PackSection,
    pub mix: MixSection,
    pub gate: GateSection,
    pub needle: NeedleSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output: "out".into(),
            workers: None,
            budgeter: BudgeterMode::default(),
            stages: StageToggles::default(),
            inputs: Vec::new(),
            filter: CascadeConfig::default(),
            decontam: DecontamSection::default(),
            fim: FimSection::default(),
            pack: PackSection::default(),
            mix: MixSection::default(),
            gate: GateSection::default(),
            needle: NeedleSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(src: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_toml())
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), PipelineError> {
        let src = fs::read_to_string(path).map_err(|e| PipelineError::new("config", None, e))?;
        let cfg = Self::from_toml(&src).map_err(|e| PipelineError::new("config", None, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: String,
    pub last_doc_id: Option<String>,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &str, last_doc_id: Option<String>, e: impl fmt::Display) -> Self {
        PipelineError { stage: stage.to_string(), last_doc_id, message: e.to_string() }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed", self.stage)?;
        if let Some(d) = &self.last_doc_id {
            write!(f, " (last doc {d})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for PipelineError {}

/// Failure inside a stage body; the runner adds the stage name.
#[derive(Debug)]
pub struct StageFail {
    last_doc_id: Option<String>,
    message: String,
}

impl<E: std::error::Error> From<E> for StageFail {
    fn from(e: E) -> Self {
        StageFail { last_doc_id: None, message: e.to_string() }
    }
}

fn fail_at(last: Option<&SourceDocument>, e: impl fmt::Display) -> StageFail {
    StageFail { last_doc_id: last.map(|d| d.doc_id.clone()), message: e.to_string() }
}

type StageResult<T> = Result<T, StageFail>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub docs_in: usize,
    pub docs_out: usize,
    pub tokens_out: usize,
    pub bytes_out: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub status: StageStatus,
    #[serde(flatten)]
    pub summary: StageSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageEntry>,
}

impl RunReport {
    pub fn load(output: &Path) -> std::io::Result<Self> {
        let s = fs::read_to_string(output.join(REPORT))?;
        serde_json::from_str(&s).map_err(std::io::Error::other)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_human(&self) -> String {
        let mut out = format!("{:<10} {:<8} {:>9} {:>9} {:>12} {:>12}\n", "stage", "status", "docs_in", "docs_out", "tokens", "bytes");
        for e in &self.stages {
            let status = match e.status {
                StageStatus::Ran => "ran",
                StageStatus::Skipped => "skipped",
            };
            out.push_str(&format!(
                "{:<10} {:<8} {:>9} {:>9} {:>12} {:>12}\n",
                e.stage, status, e.summary.docs_in, e.summary.docs_out, e.summary.tokens_out, e.summary.bytes_out
            ));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    key: String,
    files: BTreeMap<String, String>,
    summary: StageSummary,
}

fn rel_files(dir: &Path) -> Vec<(String, PathBuf)> {
    let mut files: Vec<(String, PathBuf)> = WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            let rel = e.path().strip_prefix(dir).ok()?;
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            (rel != STAMP).then(|| (rel, e.into_path()))
        })
        .collect();
    files.sort();
    files
}

fn hash_files(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    rel_files(dir).into_iter().map(|(rel, p)| Ok((rel, sha256_hex(&fs::read(p)?)))).collect()
}

/// Valid when the key matches and every recorded file is present with its hash.
fn valid_stamp(dir: &Path, key: &str) -> Option<StageSummary> {
    let stamp: Stamp = serde_json::from_slice(&fs::read(dir.join(STAMP)).ok()?).ok()?;
    if stamp.key != key {
        return None;
    }
    let current = hash_files(dir).ok()?;
    (current == stamp.files).then_some(stamp.summary)
}

/// Digest of a directory tree or single file (paths and contents).
fn tree_digest(path: &Path) -> std::io::Result<String> {
    let mut acc = String::new();
    if path.is_file() {
        acc.push_str(&sha256_hex(&fs::read(path)?));
    } else {
        for (rel, p) in rel_files(path) {
            acc.push_str(&format!("{rel}\0{}\n", sha256_hex(&fs::read(p)?)));
        }
    }
    Ok(sha256_hex(acc.as_bytes()))
}

fn key(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}").as_bytes())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializes")
}

/// Writes text as `shards/<sha256 prefix>.txt` under `dir` and returns the relative path.
fn write_shard(dir: &Path, text: &str) -> std::io::Result<String> {
    let rel = format!("shards/{}.txt", &sha256_hex(text.as_bytes())[..16]);
    let path = dir.join(&rel);
    fs::create_dir_all(path.parent().expect("shard has parent"))?;
    fs::write(path, text)?;
    Ok(rel)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> std::io::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).map_err(std::io::Error::other)? + "\n")
}

fn doc_stats(docs: &[SourceDocument], budgeter: &TokenBudgeter) -> (usize, usize) {
    docs.par_iter().map(|d| (budgeter.count(&d.content), d.content.len())).reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    base: &'a Path,
    out: PathBuf,
    budgeter: TokenBudgeter,
    global: String,
    report: RunReport,
}

impl Runner<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn stage(
        &mut self,
        name: &str,
        key: &str,
        body: impl FnOnce(&Path) -> StageResult<StageSummary>,
    ) -> Result<PathBuf, PipelineError> {
        let dir = self.out.join(name);
        if let Some(summary) = valid_stamp(&dir, key) {
            log::info!("{name}: outputs up to date, skipping");
            self.report.stages.push(StageEntry { stage: name.into(), status: StageStatus::Skipped, summary });
            return Ok(dir);
        }
        let io = |e: std::io::Error| PipelineError::new(name, None, e);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io)?;
        }
        fs::create_dir_all(&dir).map_err(io)?;
        log::info!("{name}: running");
        let summary =
            body(&dir).map_err(|f| PipelineError { stage: name.into(), last_doc_id: f.last_doc_id, message: f.message })?;
        let stamp = Stamp { key: key.to_string(), files: hash_files(&dir).map_err(io)?, summary: summary.clone() };
        write_json(&dir.join(STAMP), &stamp).map_err(io)?;
        self.report.stages.push(StageEntry { stage: name.into(), status: StageStatus::Ran, summary });
        Ok(dir)
    }

    fn load_docs(&self, stage: &str, dir: &Path) -> Result<Vec<SourceDocument>, PipelineError> {
        jsonl::read(&dir.join("manifest.jsonl")).map_err(|e| PipelineError::new(stage, None, e))
    }

    fn ingest(&mut self) -> Result<(Vec<SourceDocument>, String), PipelineError> {
        let mut digests = Vec::new();
        for input in &self.cfg.inputs {
            let p = self.resolve(&input.path);
            digests.push(tree_digest(&p).map_err(|e| PipelineError::new("ingest", None, format!("{}: {e}", p.display())))?);
        }
        let k = key(&["ingest", &self.global, &json(&self.cfg.inputs), &digests.join(",")]);
        let inputs: Vec<(PathBuf, IngestOptions)> = self
            .cfg
            .inputs
            .iter()
            .map(|i| {
                let mut opts = IngestOptions::new(i.domain);
                opts.max_file_bytes = i.max_file_bytes;
                if let Some(r) = &i.repo {
                    opts.repos = RepoNaming::Single(r.clone());
                }
                (self.resolve(&i.path), opts)
            })
            .collect();
        let budgeter = self.budgeter.clone();
        let dir = self.stage("ingest", &k, |dir| {
            let mut all = Vec::new();
            for (root, opts) in &inputs {
                all.extend(ingest_directory(root, opts).map_err(|e| fail_at(all.last(), e))?);
            }
            jsonl::write(&dir.join("manifest.jsonl"), &all)?;
            let docs_in = all.len();
            let kept: Vec<SourceDocument> = kept(all).collect();
            let (tokens_out, bytes_out) = doc_stats(&kept, &budgeter);
            Ok(StageSummary { docs_in, docs_out: kept.len(), tokens_out, bytes_out, details: serde_json::Value::Null })
        })?;
        let docs = kept(self.load_docs("ingest", &dir)?).collect();
        Ok((docs, k))
    }

    fn filter(&mut self, docs: Vec<SourceDocument>, upstream: &str) -> Result<(Vec<SourceDocument>, String), PipelineError> {
        let k = key(&["filter", &self.global, &json(&self.cfg.filter), upstream]);
        let cascade = self.cfg.filter.build(self.base).map_err(|e| PipelineError::new("filter", None, e))?;
        let budgeter = self.budgeter.clone();
        let dir = self.stage("filter", &k, |dir| {
            let docs_in = docs.len();
            let out = run_cascade(docs, &cascade, &budgeter);
            jsonl::write(&dir.join("manifest.jsonl"), &out.kept)?;
            jsonl::write(&dir.join("drops.jsonl"), &out.drops)?;
            let report: BTreeMap<String, _> = out.report.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            write_json(&dir.join("stages.json"), &report)?;
            let (tokens_out, bytes_out) = doc_stats(&out.kept, &budgeter);
            Ok(StageSummary {
                docs_in,
                docs_out: out.kept.len(),
                tokens_out,
                bytes_out,
                details: serde_json::to_value(&report)?,
            })
        })?;
        Ok((self.load_docs("filter", &dir)?, k))
    }

    fn decontam(&mut self, docs: Vec<SourceDocument>, upstream: &str) -> Result<(Vec<SourceDocument>, String), PipelineError> {
        let section = &self.cfg.decontam;
        let tests = match &section.tests {
            Some(p) => {
                let p = self.resolve(p);
                load_test_sets(&p).map_err(|e| PipelineError::new("decontam", None, format!("{}: {e}", p.display())))?
            }
            None => Vec::new(),
        };
        if section.n == 0 {
            return Err(PipelineError::new("decontam", None, "n must be at least 1"));
        }
        let k = key(&["decontam", &self.global, &json(section), &json(&tests), upstream]);
        let n = section.n;
        let budgeter = self.budgeter.clone();
        let dir = self.stage("decontam", &k, |dir| {
            let index = NGramIndex::build(n, tests.iter().map(|(b, t)| (b.as_str(), t.as_str())));
            let docs_in = docs.len();
            let (clean, removals) = filter_corpus(docs, &index);
            jsonl::write(&dir.join("manifest.jsonl"), &clean)?;
            jsonl::write(&dir.join("removals.jsonl"), &removals)?;
            let (tokens_out, bytes_out) = doc_stats(&clean, &budgeter);
            let details = serde_json::json!({ "test_docs": tests.len(), "windows": index.len() });
            Ok(StageSummary { docs_in, docs_out: clean.len(), tokens_out, bytes_out, details })
        })?;
        Ok((self.load_docs("decontam", &dir)?, k))
    }

    fn fim(&mut self, docs: &[SourceDocument], upstream: &str) -> Result<(Vec<FimRecord>, String), PipelineError> {
        let policy = self.cfg.fim.policy(self.cfg.seed);
        let k = key(&["fim", &self.global, &json(&self.cfg.fim), upstream]);
        let ast: BTreeSet<String> = self.cfg.fim.ast_langs.iter().cloned().collect();
        let budgeter = self.budgeter.clone();
        let code: Vec<SourceDocument> = docs.iter().filter(|d| d.domain == Domain::Code).cloned().collect();
        let dir = self.stage("fim", &k, |dir| {
            let (records, drops) = build_file_fim(&code, &policy, &ast).map_err(|e| fail_at(code.last(), e))?;
            jsonl::write(&dir.join("manifest.jsonl"), &records)?;
            jsonl::write(&dir.join("drops.jsonl"), &drops)?;
            let text: String = records.iter().map(|r| r.rendered.as_str()).collect();
            let shard = write_shard(dir, &text)?;
            let mut origins: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &records {
                let o = match r.origin {
                    SpanOrigin::RandomSpan => "random-span",
                    SpanOrigin::AstBlock => "ast-block",
                    SpanOrigin::Plain => "plain",
                };
                *origins.entry(o).or_default() += 1;
            }
            let tokens_out = records.par_iter().map(|r| budgeter.count(&r.rendered)).sum();
            let details = serde_json::json!({ "origins": origins, "shard": shard });
            Ok(StageSummary { docs_in: code.len(), docs_out: records.len(), tokens_out, bytes_out: text.len(), details })
        })?;
        let records = jsonl::read(&dir.join("manifest.jsonl")).map_err(|e| PipelineError::new("fim", None, e))?;
        Ok((records, k))
    }

    fn pack(&mut self, docs: &[SourceDocument], upstream: &str) -> Result<(), PipelineError> {
        let section = self.cfg.pack.clone();
        let policy = self.cfg.fim.policy(self.cfg.seed);
        let k = key(&["pack", &self.global, &json(&section), &json(&self.cfg.fim), upstream]);
        let budgeter = self.budgeter.clone();
        let code: Vec<SourceDocument> = docs.iter().filter(|d| d.domain == Domain::Code).cloned().collect();
        self.stage("pack", &k, |dir| {
            let bundles = RepoBundle::group(code.iter().cloned()).map_err(|e| fail_at(code.last(), e))?;
            let packed: Vec<_> = bundles
                .par_iter()
                .map(|b| {
                    let ordered = order_files(b, section.order);
                    let r = if section.fim_last {
                        pack_repo_fim_last(&ordered, section.budget, &budgeter, &policy)
                    } else {
                        pack_repo(&ordered, section.budget, &budgeter)
                    };
                    r.map_err(|e| fail_at(ordered.files.last(), e))
                })
                .collect::<Result<_, _>>()?;
            let mut text = String::new();
            let mut index = Vec::new();
            let mut warnings: Vec<PackWarning> = Vec::new();
            for out in packed {
                for (i, seq) in out.sequences.iter().enumerate() {
                    index.push(serde_json::json!({
                        "repo": seq.repo_name,
                        "sequence_idx": i,
                        "paths": seq.included_paths,
                        "approx_tokens": seq.approx_tokens,
                        "fim_applied": seq.fim_applied,
                        "offset": text.len(),
                        "len": seq.rendered.len(),
                    }));
                    text.push_str(&seq.rendered);
                }
                warnings.extend(out.warnings);
            }
            let shard = write_shard(dir, &text)?;
            jsonl::write(&dir.join("index.jsonl"), &index)?;
            jsonl::write(&dir.join("warnings.jsonl"), &warnings)?;
            let tokens_out = index.iter().map(|v| v["approx_tokens"].as_u64().unwrap_or(0) as usize).sum();
            let details = serde_json::json!({ "sequences": index.len(), "warnings": warnings.len(), "shard": shard });
            Ok(StageSummary { docs_in: code.len(), docs_out: index.len(), tokens_out, bytes_out: text.len(), details })
        })?;
        Ok(())
    }

    fn mix(&mut self, docs: &[SourceDocument], fim: Option<&[FimRecord]>, upstream: &str) -> Result<(), PipelineError> {
        let section = self.cfg.mix.clone();
        let mut targets = BTreeMap::new();
        for (name, w) in &section.targets {
            let d: Domain = name.parse().map_err(|e| PipelineError::new("mix", None, e))?;
            targets.insert(d, *w);
        }
        let k = key(&["mix", &self.global, &json(&section), upstream]);
        let seed = self.cfg.seed;
        let budgeter = self.budgeter.clone();
        self.stage("mix", &k, |dir| {
            let mut streams: BTreeMap<Domain, Vec<(String, String)>> = BTreeMap::new();
            if let Some(records) = fim {
                streams.insert(Domain::Code, records.iter().map(|r| (r.doc_id.clone(), r.rendered.clone())).collect());
            }
            for d in docs {
                if fim.is_some() && d.domain == Domain::Code {
                    continue;
                }
                if contains_sentinel(&d.content) {
                    log::warn!("mix: skipping {} (sentinel collision)", d.doc_id);
                    continue;
                }
                streams.entry(d.domain).or_default().push((d.doc_id.clone(), format!("{}{END_OF_TEXT}", d.content)));
            }
            let counted: BTreeMap<Domain, Vec<u64>> = streams
                .iter()
                .map(|(d, s)| (*d, s.par_iter().map(|(_, t)| budgeter.count(t) as u64).collect()))
                .collect();
            let available = counted.iter().map(|(d, c)| (*d, c.iter().sum())).collect();
            let plan = plan_mixture_with(&available, &targets, section.max_epochs)?;
            let emissions = sample_interleaved(&counted, &plan, seed, |t| *t)?;
            let mut text = String::new();
            let mut index = Vec::new();
            for e in &emissions {
                let (id, unit) = &streams[&e.domain][e.index];
                index.push(serde_json::json!({ "domain": e.domain, "doc_id": id, "pass": e.pass, "tokens": e.tokens }));
                text.push_str(unit);
            }
            let shard = write_shard(dir, &text)?;
            jsonl::write(&dir.join("index.jsonl"), &index)?;
            let report = mixture_report(&plan, &emissions);
            write_json(&dir.join("mixture.json"), &report)?;
            write_json(&dir.join("plan.json"), &plan)?;
            let details = serde_json::json!({ "mixture": report, "shard": shard });
            Ok(StageSummary {
                docs_in: streams.values().map(Vec::len).sum(),
                docs_out: emissions.len(),
                tokens_out: emissions.iter().map(|e| e.tokens as usize).sum(),
                bytes_out: text.len(),
                details,
            })
        })?;
        Ok(())
    }

    fn gate(&mut self) -> Result<(), PipelineError> {
        let section = &self.cfg.gate;
        let Some(input) = &section.input else {
            return Err(PipelineError::new("gate", None, "gate.input is not set"));
        };
        let input = self.resolve(input);
        let scores_path = section.scores.as_ref().map(|p| self.resolve(p));
        let io = |e: std::io::Error| PipelineError::new("gate", None, e);
        let mut digests = vec![tree_digest(&input).map_err(io)?];
        if let Some(p) = &scores_path {
            digests.push(tree_digest(p).map_err(io)?);
        }
        let mut policy = section.policy.clone();
        policy.seed = self.cfg.seed;
        let k = key(&["gate", &self.global, &json(&policy), &digests.join(",")]);
        self.stage("gate", &k, |dir| {
            let samples: Vec<InstructionSample> = jsonl::read(&input)?;
            let external = match &scores_path {
                Some(p) => ExternalScores::load(p).map_err(|e| StageFail { last_doc_id: None, message: e.to_string() })?,
                None => ExternalScores::default(),
            };
            let out = gate_instruction_corpus(&samples, &policy, &external)?;
            jsonl::write(&dir.join("kept.jsonl"), &out.kept)?;
            jsonl::write(&dir.join("drops.jsonl"), &out.drops)?;
            let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
            for d in &out.drops {
                *reasons.entry(d.reason.as_str()).or_default() += 1;
            }
            let bytes_out = out.kept.iter().map(|g| g.sample.question.len() + g.sample.answer.len()).sum();
            Ok(StageSummary {
                docs_in: samples.len(),
                docs_out: out.kept.len(),
                tokens_out: 0,
                bytes_out,
                details: serde_json::json!({ "drop_reasons": reasons }),
            })
        })?;
        Ok(())
    }

    fn needle(&mut self, docs: &[SourceDocument], upstream: &str) -> Result<(), PipelineError> {
        let section = self.cfg.needle.clone();
        let Some(needle_path) = &section.needle else {
            return Err(PipelineError::new("needle", None, "needle.needle is not set"));
        };
        let needle_path = self.resolve(needle_path);
        let source = fs::read_to_string(&needle_path).map_err(|e| PipelineError::new("needle", None, e))?;
        let k = key(&["needle", &self.global, &json(&section), &source, upstream]);
        let seed = self.cfg.seed;
        let budgeter = self.budgeter.clone();
        self.stage("needle", &k, |dir| {
            let corpus: Vec<(String, String)> = docs
                .iter()
                .filter(|d| d.domain == Domain::Code)
                .map(|d| (format!("{}/{}", d.repo, d.path), d.content.clone()))
                .collect();
            let template = NeedleSpec { seed, ..NeedleSpec::new(&source, &section.language, 0.0, 1) };
            let grid = generate_grid(&corpus, &section.depths, &section.lengths, &template, &budgeter)?;
            let mut rows = Vec::new();
            for inst in &grid {
                let context_path = write_shard(dir, &inst.prompt())?;
                rows.push(serde_json::json!({
                    "instance_id": inst.instance_id,
                    "depth": inst.depth,
                    "length": inst.length,
                    "context_path": context_path,
                    "expected": inst.expected,
                    "actual_depth": inst.actual_depth,
                    "actual_length": inst.actual_length,
                }));
            }
            jsonl::write(&dir.join("instances.jsonl"), &rows)?;
            let tokens_out = grid.iter().map(|g| g.actual_length).sum();
            let bytes_out = grid.iter().map(|g| g.context.len()).sum();
            Ok(StageSummary { docs_in: corpus.len(), docs_out: grid.len(), tokens_out, bytes_out, details: serde_json::Value::Null })
        })?;
        Ok(())
    }
}

/// Worker count from the environment, then the config; `None` keeps rayon's default.
pub fn worker_count(cfg: &PipelineConfig) -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n > 0).or(cfg.workers)
}

/// Runs every enabled stage and writes `report.json` to the output root.
pub fn run(cfg: &PipelineConfig, base: &Path) -> Result<RunReport, PipelineError> {
    run_with_workers(cfg, base, worker_count(cfg))
}

pub fn run_with_workers(cfg: &PipelineConfig, base: &Path, workers: Option<usize>) -> Result<RunReport, PipelineError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| PipelineError::new("setup", None, e))?;
    pool.install(|| run_stages(cfg, base))
}

fn run_stages(cfg: &PipelineConfig, base: &Path) -> Result<RunReport, PipelineError> {
    let mut r = Runner {
        cfg,
        base,
        out: base.join(&cfg.output),
        budgeter: TokenBudgeter::from(cfg.budgeter),
        global: json(&(cfg.seed, cfg.budgeter)),
        report: RunReport::default(),
    };
    let s = &cfg.stages;
    if s.ingest {
        let (mut docs, mut k) = r.ingest()?;
        if s.filter {
            (docs, k) = r.filter(docs, &k)?;
        }
        if s.decontam {
            (docs, k) = r.decontam(docs, &k)?;
        }
        let fim = if s.fim { Some(r.fim(&docs, &k)?) } else { None };
        if s.pack {
            r.pack(&docs, &k)?;
        }
        if s.mix {
            let upstream = key(&[&k, fim.as_ref().map_or("no-fim", |(_, fk)| fk.as_str())]);
            r.mix(&docs, fim.as_ref().map(|(recs, _)| recs.as_slice()), &upstream)?;
        }
        if s.needle {
            r.needle(&docs, &k)?;
        }
    } else if s.filter || s.decontam || s.fim || s.pack || s.mix || s.needle {
        log::warn!("ingest is disabled; skipping the pretraining stages");
    }
    if s.gate {
        r.gate()?;
    }
    if !r.report.stages.is_empty() {
        fs::create_dir_all(&r.out).map_err(|e| PipelineError::new("report", None, e))?;
        fs::write(r.out.join(REPORT), r.report.to_json()).map_err(|e| PipelineError::new("report", None, e))?;
    }
    Ok(r.report)
}
