use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dfdetect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfdetect")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dfdetect(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "data": {"size": 16, "train_real": 40, "train_fake": 60, "val_real": 16, "val_fake": 16},
        "stage1": {"epochs": 1, "batch_size": 8},
        "stage2": {"epochs": 2, "batch_size": 8},
        "ablation": {"seeds": [0], "configs": ["full", "bce-instead-supcon"]},
        "seed": 3,
        "out_dir": dir.join("run"),
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"stage1": {"epochz": 3}}"#).unwrap();
    let out = dfdetect(&["--config", path.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn invalid_values_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"sampling": {"n_models": 4}}"#).unwrap();
    let out = dfdetect(&["--config", path.to_str().unwrap(), "partition"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_models"));

    assert_eq!(dfdetect(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dfdetect(&["--threads", "0", "synth"]).status.code(), Some(1));
    assert_eq!(dfdetect(&["--help"]).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn step_by_step_recipe_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    for step in ["synth", "augment-offline", "partition", "train", "ensemble"] {
        ok(&["--config", &cfg, step]);
    }
    assert!(run.join("config.resolved.json").exists());
    for name in ["m1-local-cnn", "m2-multiscale-cnn", "m3-global-mlp"] {
        let m = run.join("models").join(name);
        for f in ["backbone.ckpt", "classifier.ckpt", "stage1_log.jsonl", "stage2_log.jsonl", "predictions.csv", "metrics.json"] {
            assert!(m.join(f).exists(), "{name}/{f}");
        }
    }
    let decisions = fs::read_to_string(run.join("ensemble/decisions.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 1 + 32);
    assert!(decisions.starts_with("id,prob_m1,prob_m2,prob_m3,vote,rendered,label"));

    // eval reproduces the metrics written by train
    let before = fs::read(run.join("models/m1-local-cnn/metrics.json")).unwrap();
    ok(&["--config", &cfg, "eval"]);
    assert_eq!(before, fs::read(run.join("models/m1-local-cnn/metrics.json")).unwrap());

    ok(&["--config", &cfg, "report"]);
    let first = fs::read(run.join("report/summary.json")).unwrap();
    let first_txt = fs::read(run.join("report/summary.txt")).unwrap();
    ok(&["--config", &cfg, "report"]);
    assert_eq!(first, fs::read(run.join("report/summary.json")).unwrap());
    assert_eq!(first_txt, fs::read(run.join("report/summary.txt")).unwrap());
    assert!(run.join("report/m2-multiscale-cnn-after.svg").exists());
}

#[test]
fn ablation_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&["--config", &cfg, "ablate"]);
    assert!(out.contains("bce-instead-supcon"), "{out}");
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/ablation/table.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}
