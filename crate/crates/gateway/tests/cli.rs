use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn obfusgate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obfusgate")).current_dir(dir).args(args).output().unwrap()
}

fn write_titles(dir: &Path) {
    let lines: Vec<String> = ["Lavender body lotion", "Lavender body lotions", "Argan oil shampoo", "Vitamin C serum", "Clay face mask", "Rose lip balm", "Aloe vera gel"]
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"id": format!("t{i}"), "text": t}).to_string())
        .collect();
    std::fs::write(dir.join("titles.jsonl"), lines.join("\n")).unwrap();
}

#[test]
fn obfuscate_entities_writes_store() {
    let dir = tempfile::tempdir().unwrap();
    write_titles(dir.path());
    let out = obfusgate(dir.path(), &["obfuscate-entities", "--in", "titles.jsonl", "--rho", "0.15", "--epsilon-ldp", "10", "--out", "result.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(result["entry_count"], 7);
    let store = dir.path().join("store/default/v1/entities.jsonl");
    assert_eq!(std::fs::read_to_string(store).unwrap().lines().count(), 7);
}

#[test]
fn same_config_reproduces_store_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        write_titles(dir.path());
        let out = obfusgate(dir.path(), &["--seed", "11", "obfuscate-entities", "--in", "titles.jsonl"]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |d: &Path| std::fs::read(d.join("store/default/v1/entities.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn attack_baseline_from_store_file() {
    let dir = tempfile::tempdir().unwrap();
    write_titles(dir.path());
    assert_eq!(obfusgate(dir.path(), &["obfuscate-entities", "--in", "titles.jsonl"]).status.code(), Some(0));
    std::fs::copy(dir.path().join("store/default/v1/entities.jsonl"), dir.path().join("store.jsonl")).unwrap();
    let out = obfusgate(dir.path(), &["attack", "--store", "store.jsonl", "--baseline", "random", "--n", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n"], 7);
    for metric in ["cosine", "rouge_1", "rouge_2", "rouge_l", "meteor"] {
        let v = report["means"][metric].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(report["config_hash"].is_string());
}

#[test]
fn usage_errors_exit_one_with_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    let out = obfusgate(dir.path(), &["obfuscate-entities", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    assert_eq!(obfusgate(dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = obfusgate(dir.path(), &["obfuscate-entities", "--in", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[pipeline.adjacency]\nrho = 3.0\n[attack]\nn_samples = 0\n").unwrap();
    let out = obfusgate(dir.path(), &["--config", "bad.toml", "obfuscate-text", "--text", "Hello there."]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rho") && err.contains("n_samples"), "{err}");
}

#[test]
fn infer_reports_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    write_titles(dir.path());
    assert_eq!(obfusgate(dir.path(), &["obfuscate-entities", "--in", "titles.jsonl", "--task", "shop"]).status.code(), Some(0));
    let out = obfusgate(dir.path(), &["infer", "--task", "shop", "--user", "u1", "--history", "t1,t9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t9"));
    let out = obfusgate(dir.path(), &["infer", "--task", "shop", "--user", "u1", "--history", "t1,t2"]);
    assert_eq!(out.status.code(), Some(0));
}
