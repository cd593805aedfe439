mod common;

use std::path::Path;

use common::{small_config, snapshot, write_fake_mnist};
use tdvmm::experiment::{
    config_load, export_report, run_experiment, Command, ExperimentConfig, Summary, TestSource,
};
use tdvmm::extraction::{ExtractionModel, WemMethod};
use tdvmm::Error;

fn fixture() -> (tempfile::TempDir, ExperimentConfig) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_fake_mnist(&data, 400, 200);
    let cfg = small_config(&data);
    (tmp, cfg)
}

fn read_summary(dir: &Path) -> Summary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn resolved_config_is_echoed_and_reloads() {
    let (tmp, mut cfg) = fixture();
    cfg.deltaw.time_unit = Some(2e-7);
    let out = tmp.path().join("run");
    run_experiment(&cfg, Command::Deltaw, &out).unwrap();
    let echoed = config_load(&out.join("config.resolved.toml")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn train_reports_all_pipeline_accuracies() {
    let (tmp, cfg) = fixture();
    let out = tmp.path().join("train");
    let s = run_experiment(&cfg, Command::Train, &out).unwrap();
    for k in ["float", "quantized", "bl_only", "xt_only", "hwa"] {
        let a = s.metrics[&format!("accuracy.{k}")].unwrap();
        assert!((0.0..=1.0).contains(&a), "{k}: {a}");
    }
    let f = s.metrics["accuracy.float"].unwrap();
    assert!(f > 0.5, "fake digits are easy, got {f}");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + cfg.training.epochs);
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 201);
    assert!(preds.starts_with("sample,label,float,quantized,bl_only,xt_only,hwa"));
}

#[test]
fn retrain_is_byte_deterministic() {
    let (tmp, cfg) = fixture();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&cfg, Command::Retrain, &a).unwrap();
    run_experiment(&cfg, Command::Retrain, &b).unwrap();
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn seed_changes_the_results() {
    let (tmp, mut cfg) = fixture();
    let a = tmp.path().join("a");
    run_experiment(&cfg, Command::Deltaw, &a).unwrap();
    cfg.seed = 9;
    let b = tmp.path().join("b");
    run_experiment(&cfg, Command::Deltaw, &b).unwrap();
    assert_ne!(read_summary(&a).metrics, read_summary(&b).metrics);
}

#[test]
fn margins_agree_with_predictions() {
    let (tmp, cfg) = fixture();
    let out = tmp.path().join("dm");
    let s = run_experiment(&cfg, Command::DmReport, &out).unwrap();
    assert!(s.checks["margin_sign_consistent"]);
    let total: f64 = ["i", "ii", "iii", "iv"]
        .iter()
        .map(|q| s.metrics[&format!("quadrant.before.{q}")].unwrap())
        .sum();
    assert_eq!(total, 200.0);
    let hist = std::fs::read_to_string(out.join("margin_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3 * cfg.training.margin_bins);
}

#[test]
fn ablation_none_row_is_the_quantized_baseline() {
    let (tmp, cfg) = fixture();
    let s = run_experiment(&cfg, Command::Ablate, &tmp.path().join("ab")).unwrap();
    assert!(s.checks["none_equals_quantized"]);
    assert_eq!(s.metrics["degradation.none"], Some(0.0));
    for k in ["layer1", "layer2", "all"] {
        assert!(s.metrics.contains_key(&format!("degradation.{k}")));
    }
}

#[test]
fn extract_emits_a_model_by_method_table() {
    let (tmp, cfg) = fixture();
    let out = tmp.path().join("ex");
    let s = run_experiment(&cfg, Command::Extract, &out).unwrap();
    for m in [WemMethod::Wem3, WemMethod::Wem4] {
        for model in ExtractionModel::ALL {
            assert!(s.metrics.contains_key(&format!("ser_mean.{}.{}", m.name(), model.name())));
        }
    }
    let ser = std::fs::read_to_string(out.join("ser.csv")).unwrap();
    assert_eq!(ser.lines().count(), 1 + 2 * 2 * 4);
    assert!(out.join("measurements/seed0_wem3.csv").is_file());
    assert!(out.join("weights/seed1_truth.txt").is_file());
}

#[test]
fn extract_without_dataset_uses_random_test_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("missing"));
    cfg.extraction.methods = vec![WemMethod::Wem3];
    cfg.extraction.test_source = TestSource::Wem3;
    cfg.extraction.seeds = 1;
    let s = run_experiment(&cfg, Command::Extract, &tmp.path().join("ex")).unwrap();
    assert!(s.metrics["ser_mean.wem3.full"].is_some());
}

#[test]
fn extract_reads_saved_measurements() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("missing"));
    cfg.extraction.methods = vec![WemMethod::Wem3];
    cfg.extraction.test_source = TestSource::Wem3;
    cfg.extraction.seeds = 1;
    let first = tmp.path().join("first");
    run_experiment(&cfg, Command::Extract, &first).unwrap();
    cfg.extraction.measurements = Some(first.join("measurements/seed0_wem3.csv"));
    cfg.extraction.test_measurements = Some(first.join("measurements/seed0_test.csv"));
    cfg.extraction.models = vec![ExtractionModel::Ideal, ExtractionModel::Full];
    let s = run_experiment(&cfg, Command::Extract, &tmp.path().join("second")).unwrap();
    // The test batch and extraction data are the same as in the first run.
    let a = read_summary(&first).metrics["ser.wem3.ideal.seed0"];
    assert_eq!(s.metrics["ser.wem3.ideal.seed0"], a);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("missing"));
    let e = run_experiment(&cfg, Command::Train, &tmp.path().join("t")).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}

#[test]
fn single_run_report_matches_summary() {
    let (tmp, cfg) = fixture();
    let run = tmp.path().join("runs/lut");
    let s = run_experiment(&cfg, Command::LutCheck, &run).unwrap();
    let rep = export_report(std::slice::from_ref(&run), &tmp.path().join("rep")).unwrap();
    assert_eq!(rep.runs.len(), 1);
    assert_eq!(rep.runs[0].metrics, s.metrics);
    assert_eq!(rep.runs[0].checks, s.checks);
    let table = std::fs::read_to_string(tmp.path().join("rep/comparison.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("command,seed,run,metric,value"));
    assert_eq!(lines.count(), s.metrics.len());
}

#[test]
fn report_keys_rows_by_seed() {
    let (tmp, mut cfg) = fixture();
    let root = tmp.path().join("runs");
    for seed in [3, 4] {
        cfg.seed = seed;
        run_experiment(&cfg, Command::Deltaw, &root.join(format!("dw{seed}"))).unwrap();
    }
    let rep = export_report(&[root], &tmp.path().join("rep")).unwrap();
    let seeds: Vec<u64> = rep.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![3, 4]);
    let hist = std::fs::read_to_string(tmp.path().join("rep/deltaw_histogram.csv")).unwrap();
    assert!(hist.starts_with("run,series,lo,hi,count"));
    assert!(hist.contains("\ndw3,") && hist.contains("\ndw4,"));
}

#[test]
fn report_recomputes_ser_ordering_from_csv() {
    let (tmp, cfg) = fixture();
    let run = tmp.path().join("ex");
    let s = run_experiment(&cfg, Command::Extract, &run).unwrap();
    let rep = export_report(&[run], &tmp.path().join("rep")).unwrap();
    assert_eq!(rep.runs[0].checks, s.checks);
    assert!(rep.runs[0].checks.contains_key("ser_order_mean.wem3"));
}

#[test]
fn report_rejects_other_schema_versions() {
    let (tmp, cfg) = fixture();
    let run = tmp.path().join("lut");
    run_experiment(&cfg, Command::LutCheck, &run).unwrap();
    let path = run.join("summary.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
    match export_report(&[run], &tmp.path().join("rep")) {
        Err(e @ Error::Merge(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected merge error, got {other:?}"),
    }
}

#[test]
fn report_detects_edited_csv() {
    let (tmp, cfg) = fixture();
    let run = tmp.path().join("dw");
    run_experiment(&cfg, Command::Deltaw, &run).unwrap();
    let path = run.join("deltaw_samples.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[4] = "1e-6".into();
    lines[1] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match export_report(&[run], &tmp.path().join("rep")) {
        Err(e @ Error::Check(_)) => assert_eq!(e.exit_code(), 5),
        other => panic!("expected check error, got {other:?}"),
    }
}
