use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ta2cl"))
}

fn tiny_config(root: &Path) -> Value {
    json!({
        "name": "tiny",
        "seed": 3,
        "paths": { "data": root.join("data"), "out": root.join("out") },
        "synth": {
            "n_subjects": 4, "n_stimuli": 6, "n_classes": 3, "channels": 2,
            "sample_rate": 32.0, "window_len": 2.0, "pattern_len": 0.75,
            "max_latency_shift": 0.8, "noise_sigma": 0.5,
            "subject_gain_range": [0.8, 1.2], "seed": 1, "windows_per_trial": 3
        },
        "encoder": {
            "channels": 2, "n_time_filters": 4, "time_filter_len": 5, "n_ms_filters": 1,
            "ms_filter_time_len": 3, "dilation_array": [1, 2, 3, 4], "avg_pool_len": 4,
            "time_smoother_len": 3, "dropout": 0.1
        },
        "schedule": {
            "pretrain": { "lr": 0.003, "weight_decay": 0.00015, "epochs": 2, "steps_per_epoch": 3 },
            "classify": { "lr": 0.005, "weight_decay": 0.0022, "max_epochs": 20, "min_epochs": 5, "patience": 5 },
            "batch_size": 6
        },
        "classifier_hidden": [16],
        "window_samples": 64,
        "folds": { "KFoldSubjects": 2 },
        "ablation": { "ks": [1, 2, 3], "max_curves": 4, "top3_pairs": 4, "top3_bins": 5 }
    })
}

fn write_config(root: &Path, cfg: &Value, name: &str) -> PathBuf {
    let path = root.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(cmd: &[&str], config: &Path) -> Output {
    bin().args(cmd).arg("--config").arg(config).output().unwrap()
}

fn synth_into(root: &Path, cfg: &Value) -> PathBuf {
    std::fs::create_dir_all(root.join("data")).unwrap();
    let path = write_config(root, cfg, "run.json");
    let out = run(&["synth"], &path);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_one_file_per_trial_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg["synth"]["n_subjects"] = json!(6);
    cfg["synth"]["n_stimuli"] = json!(9);
    let config = synth_into(dir.path(), &cfg);
    let seg_dir = dir.path().join("data/segments");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&seg_dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 54);
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 54);
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert!(run(&["synth"], &config).status.success());
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
    assert_eq!(manifest, std::fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap());
}

#[test]
fn synth_into_missing_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let config = write_config(dir.path(), &cfg, "run.json");
    let out = run(&["synth"], &config);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "runtime");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg["encoder"]["bogus"] = json!(1);
    let config = write_config(dir.path(), &cfg, "run.json");
    let out = run(&["eval"], &config);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn invalid_values_are_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg["schedule"]["classify"]["min_epochs"] = json!(500);
    let config = write_config(dir.path(), &cfg, "run.json");
    let out = run(&["eval"], &config);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn pretrain_then_classify_and_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let config = synth_into(dir.path(), &cfg);
    let out = run(&["pretrain"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("out/encoder.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    let record = read_json(&dir.path().join("out/pretrain.json"));
    assert_eq!(record["loss_curve"].as_array().unwrap().len(), 2);
    assert_eq!(record["config"]["seed"], 3);

    let out = run(&["classify"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    let report = read_json(&dir.path().join("out/classify.json"));
    let digest = report["folds"][0]["encoder_digest"].clone();
    assert!(report["folds"].as_array().unwrap().iter().all(|f| f["encoder_digest"] == digest));
    assert!(report["folds"][0]["pretrain"].is_null());

    let mut bad = cfg.clone();
    bad["encoder"]["channels"] = json!(3);
    bad["synth"] = Value::Null;
    bad["paths"]["checkpoint"] = json!(ckpt);
    bad["paths"]["out"] = json!(dir.path().join("bad"));
    let bad_config = write_config(dir.path(), &bad, "bad.json");
    let out = run(&["eval"], &bad_config);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("shape mismatch"), "{msg}");
}

#[test]
fn eval_replays_from_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let config = synth_into(dir.path(), &cfg);
    let out = bin()
        .args(["eval", "--seed", "11", "--jobs", "2", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut first = read_json(&dir.path().join("out/eval.json"));
    assert_eq!(first["config"]["seed"], 11);
    assert_eq!(first["seed"], 11);
    let echo = dir.path().join("echo.json");
    std::fs::copy(dir.path().join("out/config.json"), &echo).unwrap();
    let curves = std::fs::read_to_string(dir.path().join("out/eval_loss_curves.csv")).unwrap();
    assert!(run(&["eval"], &echo).status.success());
    let mut second = read_json(&dir.path().join("out/eval.json"));
    first["wall_time_secs"] = json!(0);
    second["wall_time_secs"] = json!(0);
    assert_eq!(first, second);
    assert_eq!(curves, std::fs::read_to_string(dir.path().join("out/eval_loss_curves.csv")).unwrap());
    let csv = std::fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
}

#[test]
fn ablate_k_reports_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let config = synth_into(dir.path(), &cfg);
    let out = run(&["ablate", "k"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read_json(&dir.path().join("out/ablation_k.json"));
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["K=1", "K=2", "K=3"]);
    assert_eq!(table["paper_reference"][0]["reproducible"], false);
    let csv = std::fs::read_to_string(dir.path().join("out/ablation_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn ablate_attention_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let config = synth_into(dir.path(), &cfg);
    let out = run(&["ablate", "attention"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curves = std::fs::read_to_string(dir.path().join("out/attention_curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("window,step,attention"));
    assert_eq!(curves.lines().count(), 1 + 4 * 16);
    let table = read_json(&dir.path().join("out/ablation_attention.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn preprocess_section_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let config = synth_into(dir.path(), &cfg);
    cfg["preprocess"] = json!({ "band": [0.5, 12.0], "artifact_thresholds": [{"m": 30.0, "n": 0.01}] });
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = run(&["eval"], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    cfg["preprocess"] = json!({ "target_rate": 20.0 });
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = run(&["eval"], &config);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_flag_is_a_validation_error() {
    let out = bin().arg("eval").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
