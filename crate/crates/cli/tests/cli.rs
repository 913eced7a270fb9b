use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const GEN: &str = r#"{"len": 32, "feature_dim": 4, "count_range": [1, 3], "cycle_len_range": [3, 6],
    "interval_len_range": [1, 3], "sequences": 12, "split": {"train": 0.5, "val": 0.25, "test": 0.25}}"#;
const TRAIN: &str = r#"{"epochs": 2, "batch_size": 2, "learning_rate": 0.001, "L": 16, "d_model": 8,
    "fusion_channels": 2, "head_hidden": 8, "ffn_hidden": 8}"#;

fn repcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repcount"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn setup(dir: &Path) -> (String, String) {
    let gen = write(dir, "gen.json", GEN);
    let train = write(dir, "train.json", TRAIN);
    let data = dir.join("data").to_string_lossy().into_owned();
    let out = repcount(&["gen", "--config", &gen, "--out", &data, "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, train)
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, train) = setup(dir.path());
    let ckpt = dir.path().join("ckpt").to_string_lossy().into_owned();

    let out = repcount(&["train", "--data", &data, "--config", &train, "--out", &ckpt, "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echo["command"], "train");
    assert_eq!(echo["config"]["seed"], 1);
    assert_eq!(echo["config"]["len"], 16);
    let log = std::fs::read_to_string(dir.path().join("ckpt/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt_file = format!("{ckpt}/checkpoint.bin");
    let report = dir.path().join("report.jsonl").to_string_lossy().into_owned();
    let out = repcount(&["eval", "--data", &data, "--ckpt", &ckpt_file, "--split", "test", "--out", &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let summary: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(summary["mae"].as_f64().unwrap() >= 0.0);
    assert_eq!(text.lines().count(), 1 + 3);

    let emb = dir.path().join("emb.csv").to_string_lossy().into_owned();
    let out = repcount(&["export-embeddings", "--data", &data, "--ckpt", &ckpt_file, "--out", &emb]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&emb).unwrap();
    assert!(csv.starts_with("id,kind,start,end,f0,"));

    // same seed, same bytes
    let again = dir.path().join("again").to_string_lossy().into_owned();
    let out = repcount(&["train", "--data", &data, "--config", &train, "--out", &again, "--seed", "1"]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&ckpt_file).unwrap(),
        std::fs::read(format!("{again}/checkpoint.bin")).unwrap()
    );
}

#[test]
fn mismatched_feature_dim_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, train) = setup(dir.path());
    let ckpt = dir.path().join("ckpt").to_string_lossy().into_owned();
    assert!(repcount(&["train", "--data", &data, "--config", &train, "--out", &ckpt]).status.success());

    let wide = write(dir.path(), "wide.json", &GEN.replace("\"feature_dim\": 4", "\"feature_dim\": 5"));
    let other = dir.path().join("other").to_string_lossy().into_owned();
    assert!(repcount(&["gen", "--config", &wide, "--out", &other]).status.success());
    let out = repcount(&["eval", "--data", &other, "--ckpt", &format!("{ckpt}/checkpoint.bin")]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_record(&out);
    assert_eq!(err["exit"], 1);
    assert!(err["error"]["kind"].is_string());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let out = repcount(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"alpha": -1}"#);
    let out = repcount(&["train", "--data", "nowhere", "--config", &bad, "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "config");

    let unknown = write(dir.path(), "unknown.json", r#"{"epochz": 3}"#);
    let out = repcount(&["train", "--data", "nowhere", "--config", &unknown, "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    let out = Command::new(env!("CARGO_BIN_EXE_repcount"))
        .args(["grad-check", "--seeds", "1"])
        .env("REPCOUNT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json").to_string_lossy().into_owned();
    let out = repcount(&["grad-check", "--seeds", "2", "--out", &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().skip(1).all(|l| l.starts_with("pass ")));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().len() > 30);
}

#[test]
fn ablate_writes_table_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, train) = setup(dir.path());
    let train = write(dir.path(), "one.json", &train_one_epoch(&train));
    let out_dir = dir.path().join("abl").to_string_lossy().into_owned();
    let out = repcount(&["ablate", "--data", &data, "--config", &train, "--out", &out_dir, "--suite", "rca", "--seed-count", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("rca,rca=on,2,"));
    assert!(dir.path().join("abl/reports/rca/rca=off/seed1.jsonl").is_file());
}

fn train_one_epoch(path: &str) -> String {
    std::fs::read_to_string(path).unwrap().replace("\"epochs\": 2", "\"epochs\": 1")
}
