use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/mini")
}

fn codemill(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_codemill")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "codemill {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn lines(p: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_commands_chain_through_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let m = mini();
    codemill(&["ingest", s(&m.join("code")), "--out", s(&t.join("code.jsonl"))]);
    codemill(&["ingest", s(&m.join("text")), "--domain", "text", "--repo", "text", "--out", s(&t.join("text.jsonl"))]);
    codemill(&["ingest", s(&m.join("math")), "--domain", "math", "--repo", "math", "--out", s(&t.join("math.jsonl"))]);
    let ingested = lines(&t.join("code.jsonl")).len();
    codemill(&["filter", s(&t.join("code.jsonl")), "--out", s(&t.join("f.jsonl")), "--drops", s(&t.join("drops.jsonl"))]);
    let filtered = lines(&t.join("f.jsonl")).len();
    assert!(filtered < ingested);
    codemill(&[
        "decontam",
        s(&t.join("f.jsonl")),
        "--tests",
        s(&m.join("testsets")),
        "--out",
        s(&t.join("d.jsonl")),
        "--removals",
        s(&t.join("removals.jsonl")),
    ]);
    assert_eq!(lines(&t.join("d.jsonl")).len(), filtered - 1);
    codemill(&["fim", s(&t.join("d.jsonl")), "--rate", "1.0", "--ast-langs", "python", "--out", s(&t.join("fim.jsonl"))]);
    for r in lines(&t.join("fim.jsonl")) {
        assert!(r["rendered"].as_str().unwrap().ends_with("<|endoftext|>"));
    }
    codemill(&["pack", s(&t.join("d.jsonl")), "--budget", "1024", "--fim-last", "--out", s(&t.join("pack.jsonl"))]);
    for seq in lines(&t.join("pack.jsonl")) {
        assert!(seq["approx_tokens"].as_u64().unwrap() <= 1024);
        assert!(seq["rendered"].as_str().unwrap().starts_with("<|repo_name|>"));
    }
    let report = codemill(&[
        "mix",
        s(&t.join("d.jsonl")),
        s(&t.join("text.jsonl")),
        s(&t.join("math.jsonl")),
        "--out",
        s(&t.join("mix.jsonl")),
        "--text",
        s(&t.join("mix.txt")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 3);
    assert!(!lines(&t.join("mix.jsonl")).is_empty());
}

#[test]
fn run_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    for e in files_under(&mini()) {
        let to = tmp.path().join(e.strip_prefix(mini()).unwrap());
        fs::create_dir_all(to.parent().unwrap()).unwrap();
        fs::copy(&e, to).unwrap();
    }
    let cfg = tmp.path().join("pipeline.toml");
    let human = codemill(&["run", s(&cfg), "--workers", "2"]);
    assert!(human.contains("decontam"));
    let json = codemill(&["report", s(&tmp.path().join("out")), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    let stages: Vec<&str> = report["stages"].as_array().unwrap().iter().map(|e| e["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["ingest", "filter", "decontam", "fim", "pack", "mix", "needle", "gate"]);
    let again = codemill(&["run", s(&cfg)]);
    assert_eq!(again.matches("skipped").count(), 8);

    let instances = tmp.path().join("instances.jsonl");
    codemill(&[
        "needle",
        "gen",
        s(&tmp.path().join("out/decontam/manifest.jsonl")),
        "--needle",
        s(&tmp.path().join("needle.py")),
        "--depths",
        "0,0.5,1",
        "--lengths",
        "256",
        "--out",
        s(&instances),
    ]);
    let responses: String = lines(&instances)
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let response = if i == 0 { "no idea".to_string() } else { inst["expected"].as_str().unwrap().to_string() };
            serde_json::json!({ "instance_id": inst["instance_id"], "response": response }).to_string() + "\n"
        })
        .collect();
    fs::write(tmp.path().join("responses.jsonl"), responses).unwrap();
    let csv = codemill(&["needle", "score", s(&instances), "--responses", s(&tmp.path().join("responses.jsonl"))]);
    assert_eq!(csv, "depth,length,score\n0,256,0\n0.5,256,1\n1,256,1\n");
}

#[test]
fn gate_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("kept.jsonl");
    let drops = tmp.path().join("drops.jsonl");
    codemill(&["gate", s(&mini().join("instructions.jsonl")), "--out", s(&out), "--drops", s(&drops)]);
    let kept = lines(&out).len();
    let dropped = lines(&drops).len();
    assert_eq!(kept + dropped, 8);
    assert!(lines(&drops).iter().any(|d| d["reason"] == "static-check"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_codemill")).args(["report", "/nonexistent/out"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no report"));
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out
}
