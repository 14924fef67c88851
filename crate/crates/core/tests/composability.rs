use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use codemill::budget::TokenBudgeter;
use codemill::decontam::{filter_corpus, load_test_sets, NGramIndex};
use codemill::document::{Domain, SourceDocument};
use codemill::filter::run_cascade;
use codemill::fim::{build_file_fim, FimRecord};
use codemill::gate::{gate_instruction_corpus, ExternalScores, GatedSample, InstructionSample};
use codemill::ingest::{ingest_directory, kept, IngestOptions, RepoNaming};
use codemill::jsonl;
use codemill::pipeline::{run_with_workers, PipelineConfig};

fn copy_mini(to: &Path) {
    let from = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mini");
    for e in walkdir::WalkDir::new(&from).into_iter().filter_map(Result::ok).filter(|e| e.file_type().is_file()) {
        let p = to.join(e.path().strip_prefix(&from).unwrap());
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::copy(e.path(), p).unwrap();
    }
}

#[test]
fn stages_by_hand_match_the_composed_run() {
    let dir = tempfile::tempdir().unwrap();
    copy_mini(dir.path());
    let (cfg, base) = PipelineConfig::load(&dir.path().join("pipeline.toml")).unwrap();
    run_with_workers(&cfg, &base, Some(3)).unwrap();
    let out = base.join(&cfg.output);

    let mut docs = Vec::new();
    for input in &cfg.inputs {
        let mut opts = IngestOptions::new(input.domain);
        opts.max_file_bytes = input.max_file_bytes;
        if let Some(r) = &input.repo {
            opts.repos = RepoNaming::Single(r.clone());
        }
        docs.extend(ingest_directory(&base.join(&input.path), &opts).unwrap());
    }
    let budgeter = TokenBudgeter::from(cfg.budgeter);
    let filtered = run_cascade(kept(docs).collect(), &cfg.filter.build(&base).unwrap(), &budgeter).kept;
    let tests = load_test_sets(&base.join(cfg.decontam.tests.as_ref().unwrap())).unwrap();
    let index = NGramIndex::build(cfg.decontam.n, tests.iter().map(|(b, t)| (b.as_str(), t.as_str())));
    let (clean, _) = filter_corpus(filtered, &index);
    let from_run: Vec<SourceDocument> = jsonl::read(&out.join("decontam/manifest.jsonl")).unwrap();
    assert_eq!(clean, from_run);

    let code: Vec<SourceDocument> = clean.iter().filter(|d| d.domain == Domain::Code).cloned().collect();
    let ast: BTreeSet<String> = cfg.fim.ast_langs.iter().cloned().collect();
    let (records, _) = build_file_fim(&code, &cfg.fim.policy(cfg.seed), &ast).unwrap();
    let from_run: Vec<FimRecord> = jsonl::read(&out.join("fim/manifest.jsonl")).unwrap();
    assert_eq!(records, from_run);

    let samples: Vec<InstructionSample> = jsonl::read(&base.join(cfg.gate.input.as_ref().unwrap())).unwrap();
    let scores = ExternalScores::load(&base.join(cfg.gate.scores.as_ref().unwrap())).unwrap();
    let policy = codemill::gate::GatePolicy { seed: cfg.seed, ..cfg.gate.policy.clone() };
    let gated = gate_instruction_corpus(&samples, &policy, &scores).unwrap();
    let from_run: Vec<GatedSample> = jsonl::read(&out.join("gate/kept.jsonl")).unwrap();
    assert_eq!(gated.kept, from_run);
}
