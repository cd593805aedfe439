mod common;

use std::path::Path;
use std::process::{Command, Output};

fn tdvmm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdvmm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("TDVMM_DATA_DIR")
        .output()
        .unwrap()
}

fn error_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("error.json")).unwrap()).unwrap()
}

#[test]
fn lut_check_with_defaults_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[lut]\ncheck_samples = 200\n").unwrap();
    let out = tdvmm(&["lut-check", "--config", "c.toml", "--out", "run", "--check"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] lut_fidelity"), "{stdout}");
    for f in ["summary.json", "manifest.json", "config.resolved.toml", "lut_samples.csv"] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f}");
    }
}

#[test]
fn config_errors_exit_2_with_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[device]\neta = 0.5\n").unwrap();
    let out = tdvmm(&["deltaw", "--config", "c.toml", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&tmp.path().join("run"));
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("device.eta"));
}

#[test]
fn unknown_keys_are_rejected_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "seed = 2\n\n[chip]\nnoise = 0.1\n").unwrap();
    let out = tdvmm(&["deltaw", "--config", "c.toml", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let msg = error_json(&tmp.path().join("run"))["message"].as_str().unwrap().to_string();
    assert!(msg.contains("c.toml:4:1") && msg.contains("noise"), "{msg}");
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tdvmm(&["train", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&tmp.path().join("run"))["kind"], "io");
}

#[test]
fn failed_check_exits_5_only_when_asked() {
    let tmp = tempfile::tempdir().unwrap();
    // A two-point table cannot follow the drop curve.
    std::fs::write(tmp.path().join("c.toml"), "[lut]\npoints = 2\ncheck_samples = 100\n").unwrap();
    let out = tdvmm(&["lut-check", "--config", "c.toml", "--out", "a"], tmp.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] lut_fidelity"));
    let out = tdvmm(&["lut-check", "--config", "c.toml", "--out", "b", "--check"], tmp.path());
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&tmp.path().join("b"))["kind"], "check");
}

#[test]
fn seed_flag_overrides_config_and_names_default_dir() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "seed = 1\n").unwrap();
    let out = tdvmm(&["deltaw", "--config", "c.toml", "--seed", "7"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(tmp.path().join("runs/deltaw-seed7/summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 7"));
}

#[test]
fn data_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("digits");
    common::write_fake_mnist(&data, 200, 100);
    std::fs::write(tmp.path().join("c.toml"), "[training]\nepochs = 1\ncalibration_samples = 32\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdvmm"))
        .args(["train", "--config", "c.toml", "--out", "run"])
        .current_dir(tmp.path())
        .env("TDVMM_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_merges_runs_and_rejects_bad_schema() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        let out = tdvmm(&["deltaw", "--seed", seed, "--out", &format!("runs/dw{seed}")], tmp.path());
        assert!(out.status.success());
    }
    let out = tdvmm(&["report", "runs", "--out", "rep"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(tmp.path().join("rep/comparison.csv")).unwrap();
    assert!(table.contains("deltaw,1,dw1,") && table.contains("deltaw,2,dw2,"));

    let manifest = tmp.path().join("runs/dw2/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"schema_version\": 1", "\"schema_version\": 0")).unwrap();
    let out = tdvmm(&["report", "runs", "--out", "rep2"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&tmp.path().join("rep2"))["kind"], "merge");
}
