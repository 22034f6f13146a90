mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::fixture;

fn dstc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dstc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_missing_file_names_path() {
    let out = dstc(&["ingest", "--input", "/definitely/missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing.jsonl"));
}

#[test]
fn ingest_empty_file_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = dstc(&["ingest", "--input", s(&input)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0 instructions"));
}

#[test]
fn ingest_malformed_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "{not json\n").unwrap();
    let out = dstc(&["ingest", "--input", s(&input)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ingest_fixture_corpus() {
    let out = dstc(&["ingest", "--input", s(&fixture("corpus.jsonl"))]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("5 instructions, J=3"), "{text}");
    assert!(text.contains("1 partial"), "{text}");
}

#[test]
fn bad_config_file_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = \"x\"\n").unwrap();
    assert_eq!(dstc(&["--config", s(&cfg), "ingest"]).status.code(), Some(2));
}

#[test]
fn missing_interpreter_is_sandbox_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dstc(&[
        "run",
        "--input",
        s(&fixture("corpus.jsonl")),
        "--output-dir",
        s(dir.path()),
        "--interpreter",
        "no-such-interpreter-xyz {script}",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stats_on_hand_built_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dstc(&[
        "stats",
        "--output-dir",
        s(dir.path()),
        "--oracle",
        s(&fixture("stats_oracle.jsonl")),
        "--selections",
        s(&fixture("stats_selections.jsonl")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("quality_report.csv")).unwrap();
    assert!(csv.contains("chosen_accuracy,0.75\n"));
    assert!(csv.contains("rejected_accuracy,0.25\n"));
    assert!(csv.contains("strict_gap,0.5\n"));
    assert!(csv.contains("n_instructions,4\n"));
}

#[test]
fn simulate_with_valid_tests_always_picks_correct_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dstc(&[
        "simulate",
        "--output-dir",
        s(dir.path()),
        "--p-test-valid",
        "1",
        "--n-trials",
        "2000",
        "--j",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("simulation_report.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("dstc,chosen_given_any_correct,")).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[2], "1.000000");
    assert_eq!(fields[5], fields[6]);
}

#[test]
fn train_toy_on_one_pair_decreases_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dstc(&[
        "train-toy",
        "--output-dir",
        s(dir.path()),
        "--kind",
        "dpo",
        "--dataset",
        s(&fixture("one_pair_dpo.jsonl")),
        "--steps",
        "50",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("train_trace.csv")).unwrap();
    let losses: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 51);
    assert!((losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(losses.windows(2).all(|w| w[1] < w[0]));
    assert!(dir.path().join("train_policy.json").is_file());
}

#[test]
fn run_writes_manifest() {
    if !common::python_available() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dstc(&[
        "run",
        "--input",
        s(&fixture("corpus.jsonl")),
        "--output-dir",
        s(dir.path()),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}
