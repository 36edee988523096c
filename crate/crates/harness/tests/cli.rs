use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dplab::config::{ExperimentConfig, Setting};
use dplab::experiment::{run_experiment, ExperimentReport};
use dplab::tables::{compare, ggap_table};
use dplab::HarnessError;
use dplab_core::penalise::WeightingStrategy;

fn dplab(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dplab"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        strategies: vec![WeightingStrategy::dp()],
        settings: vec![Setting::Official],
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentConfig::smoke()
    }
}

#[test]
fn tiny_experiment_emits_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run_experiment(&tiny(dir.path())).unwrap();
    assert!(start.elapsed().as_secs() < 10);
    assert!(out.report_path.is_file());
    assert!(out.dir.join("checkpoints/dp_official_seed0.json").is_file());
    assert!(out.dir.join("curves/dp_official_seed0.csv").is_file());
    assert!(out.dir.join("curves/monotonicity.json").is_file());
    let report = ExperimentReport::load(&out.report_path).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.runs.len(), 1);
    let splits: Vec<&String> = report.runs[0].splits.keys().collect();
    assert_eq!(splits, ["mixed_test", "test_id", "test_ood", "val_id", "val_ood"]);
    let curve = fs::read_to_string(out.dir.join("curves/dp_official_seed0.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3 * 2);
}

#[test]
fn same_config_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&ExperimentConfig { seeds: vec![0, 1], ..tiny(a.path()) }).unwrap();
    let rb = run_experiment(&ExperimentConfig { seeds: vec![0, 1], ..tiny(b.path()) }).unwrap();
    assert_eq!(fs::read(ra.report_path).unwrap(), fs::read(rb.report_path).unwrap());
}

#[test]
fn missing_output_parent_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("no/such/place"));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");

    let cfg_path = dir.path().join("exp.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dplab(&["run", "--config", p(&cfg_path)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"benchmark\": {}}").unwrap();
    assert_eq!(dplab(&["run", "--config", p(&path)], &[]).status.code(), Some(2));
    let mut cfg = tiny(dir.path());
    cfg.seeds.clear();
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(dplab(&["run", "--config", p(&path)], &[]).status.code(), Some(2));
    assert_eq!(dplab(&["run"], &[]).status.code(), Some(2));
}

#[test]
fn generate_train_eval_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&dplab(&["generate", "--preset", "smoke", "--out", p(&d("data"))], &[]));
    assert!(d("data/manifest.json").is_file());
    ok(&dplab(&["train", "--data", p(&d("data")), "--epochs", "2", "--lr", "0.02", "--out", p(&d("model"))], &[]));
    let ckpt = d("model/checkpoint.json");
    for split in ["official_test_ood", "val_id", "test_id"] {
        ok(&dplab(
            &[
                "eval",
                "--data",
                p(&d("data")),
                "--checkpoint",
                p(&ckpt),
                "--split",
                split,
                "--out",
                p(&d("eval.json")),
                "--predictions",
                p(&d("pred.jsonl")),
                "--ground-truth",
                p(&d("gt.jsonl")),
            ],
            &[],
        ));
        ok(&dplab(
            &["score", "--gt", p(&d("gt.jsonl")), "--pred", p(&d("pred.jsonl")), "--out", p(&d("score.json"))],
            &[],
        ));
        assert_eq!(fs::read(d("eval.json")).unwrap(), fs::read(d("score.json")).unwrap(), "split {split}");
    }
    let out = dplab(&["eval", "--data", p(&d("data")), "--checkpoint", p(&ckpt), "--split", "nope"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = dplab(&["eval", "--data", p(&d("missing")), "--checkpoint", p(&ckpt)], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn tables_from_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        ExperimentConfig { seeds: vec![0, 1], output_dir: Some(dir.path().join("a")), ..ExperimentConfig::smoke() };
    let a = run_experiment(&cfg).unwrap();
    let t = compare(std::slice::from_ref(&a.report)).unwrap();
    assert_eq!(t.rows.len(), 6);
    let cell = t.row("dp", Setting::Official).unwrap().cells[3].clone().unwrap();
    let agg = a.report.aggregate("dp", Setting::Official, "test_ood").unwrap();
    assert_eq!(cell, format!("{:.1} ({:.1})", 100.0 * agg.mean, 100.0 * agg.std));
    let single = ExperimentConfig {
        strategies: vec![WeightingStrategy::erm()],
        settings: vec![Setting::Official],
        ..cfg.clone()
    };
    let (single, _) = dplab::run_in_memory(&single).unwrap();
    assert_eq!(compare(std::slice::from_ref(&single)).unwrap().rows.len(), 1);

    let g = ggap_table(&a.report, &a.report).unwrap();
    assert_eq!(g.rows.len(), 2);
    assert_eq!(g.strategies, ["dp", "erm", "groupdro"]);
    assert_eq!(g.wins.len(), 6);

    let mut other = cfg.clone();
    other.benchmark.seed += 1;
    other.output_dir = Some(dir.path().join("b"));
    let b = run_experiment(&other).unwrap();
    assert!(matches!(compare(&[a.report.clone(), b.report.clone()]), Err(HarnessError::Mismatch(_))));
    let out = dplab(&["compare", p(&a.report_path), p(&b.report_path)], &[]);
    assert_eq!(out.status.code(), Some(2));

    let prefix = dir.path().join("cmp");
    ok(&dplab(&["compare", p(&a.report_path), "--out", p(&prefix)], &[]));
    let csv = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert!(csv.starts_with("strategy,setting,val_id,val_ood,test_id,test_ood,mixed_test\n"));
    let printed = ok(&dplab(&["ggap", "--official", p(&a.report_path)], &[]));
    assert!(printed.lines().last().unwrap().starts_with("Total,"));
    ok(&dplab(&["curves", "--report", p(&a.report_path), "--out", p(&dir.path().join("curves"))], &[]));
    assert_eq!(fs::read_dir(dir.path().join("curves")).unwrap().count(), 6 * 2 + 1);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dplab(&["demo", "--smoke"], &[("DPLAB_OUTPUT_ROOT", dir.path())]);
    ok(&out);
    let demo: Vec<PathBuf> = fs::read_dir(dir.path().join("demo")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(demo.len(), 1);
    for f in ["report.json", "compare.csv", "compare.json", "ggap.csv", "ggap.json"] {
        assert!(demo[0].join(f).is_file(), "{f}");
    }
}
