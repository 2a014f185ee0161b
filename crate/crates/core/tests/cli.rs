use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qrate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn qrate")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qrate(dir, args);
    assert!(
        out.status.success(),
        "qrate {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synthetic_then_edf_solo_writes_a_full_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "200", "--seed", "7", "--out", "len.jsonl"]);
    let printed = ok(dir, &["train", "--model", "edf-solo", "--dataset", "len.jsonl", "--output-dir", "runs"]);
    let run = dir.join(printed.trim());
    assert!(run.starts_with(dir.join("runs/len/edf-solo")));
    let report = read_json(run.join("report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 50);
    assert_eq!(report["config"]["seed"], 2021);
    for f in ["checkpoint.json", "config.json", "report.txt", "predictions.csv", "histogram.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ckpt = read_json(run.join("checkpoint.json"));
    assert_eq!(ckpt["seed"], 2021);
    assert_eq!(ckpt["config"]["model"], "edf-solo");
    let preds = fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 20);
    let hist = read_json(run.join("histogram.json"));
    let total: u64 = hist["labels"]["counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 20);
}

#[test]
fn deepqr_requires_a_pretrained_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-synthetic", "--signal", "vocabulary-split", "--n", "60", "--out", "v.jsonl"]);
    let out = qrate(tmp.path(), &["train", "--model", "deepqr", "--dataset", "v.jsonl", "--glove", "v.glove.txt"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("qdqe-pretrain"));
}

#[test]
fn evaluate_reproduces_the_training_report_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "correlation", "--n", "120", "--seed", "3", "--out", "c.jsonl"]);
    ok(
        dir,
        &["train", "--model", "combined", "--dataset", "c.jsonl", "--glove", "c.glove.txt", "--epochs", "4", "--run-dir", "run"],
    );
    let report = read_json(dir.join("run/report.json"));
    let eval: Value = serde_json::from_str(&ok(dir, &["evaluate", "--checkpoint", "run/checkpoint.json"])).unwrap();
    assert_eq!(eval["n"], report["test_size"]);
    assert_eq!(eval["mse"].as_f64().unwrap().to_bits(), report["test"]["mse"].as_f64().unwrap().to_bits());
    assert_eq!(eval["acc"].as_f64().unwrap().to_bits(), report["test"]["acc"].as_f64().unwrap().to_bits());
    assert_eq!(eval["extremes"], report["extremes"]);

    // Attention export: one 7x7 file per question, rows are distributions.
    ok(dir, &["export-attention", "--checkpoint", "run/checkpoint.json", "--out-dir", "att"]);
    let files: Vec<_> = fs::read_dir(dir.join("att")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "csv").count(), 120);
    let mut rdr = csv::Reader::from_path(dir.join("att/syn-00000.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["", "S", "A", "D1", "D2", "D3", "D4", "E"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7);
    for row in rows {
        let s: f64 = row.iter().skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn predict_handles_unlabelled_questions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "40", "--out", "l.jsonl"]);
    ok(dir, &["train", "--model", "edf-solo", "--dataset", "l.jsonl", "--epochs", "2", "--run-dir", "run"]);
    fs::write(
        dir.join("new.jsonl"),
        r#"{"id": "n1", "stem": "What is two plus two?", "answer": "4", "distractors": ["3", "5"], "explanation": "Basic sums."}"#,
    )
    .unwrap();
    ok(dir, &["predict", "--checkpoint", "run/checkpoint.json", "--dataset", "new.jsonl", "--out", "p.csv"]);
    let text = fs::read_to_string(dir.join("p.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,prediction");
    assert!(lines[1].starts_with("n1,"));
    assert!(lines[1][3..].parse::<f64>().unwrap().is_finite());
    let meta = read_json(dir.join("p.csv.meta.json"));
    assert_eq!(meta["seed"], 2021);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "40", "--out", "l.jsonl"]);
    fs::write(dir.join("cfg.json"), r#"{"epochs": 3, "seed": 5, "model": "edf-solo", "dataset": "l.jsonl"}"#).unwrap();
    ok(dir, &["--config", "cfg.json", "train", "--seed", "6", "--run-dir", "run"]);
    let report = read_json(dir.join("run/report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(report["seed"], 6);
    assert_eq!(report["config"]["seed"], 6);
}

#[test]
fn parallel_datasets_train_independently() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "40", "--seed", "1", "--out", "a.jsonl"]);
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "40", "--seed", "2", "--out", "b.jsonl"]);
    let common = ["train", "--model", "edf-solo", "--epochs", "3", "--dataset", "a.jsonl", "--dataset", "b.jsonl"];
    ok(dir, &[&common[..], &["--parallel-datasets", "--run-dir", "par"]].concat());
    ok(dir, &[&common[..], &["--run-dir", "seq"]].concat());
    for ds in ["a", "b"] {
        let par = read_json(dir.join(format!("par/{ds}/report.json")));
        let seq = read_json(dir.join(format!("seq/{ds}/report.json")));
        assert_eq!(par["test"], seq["test"]);
    }
}

#[test]
fn error_categories_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(qrate(dir, &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(qrate(dir, &["train", "--model", "edf-solo", "--dataset", "missing.jsonl"]).status.code(), Some(3));
    fs::write(dir.join("bad.jsonl"), r#"{"id": "x", "stem": "no answer field"}"#).unwrap();
    let out = qrate(dir, &["train", "--model", "edf-solo", "--dataset", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
    let help = ok(dir, &["--help"]);
    assert!(help.contains("Exit codes"));
}

#[test]
fn features_csv_has_one_row_per_question() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic", "--signal", "length-linear", "--n", "30", "--out", "l.jsonl"]);
    ok(dir, &["extract-features", "--dataset", "l.jsonl", "--out", "f.csv"]);
    let mut rdr = csv::Reader::from_path(dir.join("f.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 2 + 18);
    assert_eq!(rdr.records().count(), 30);
}
