use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dplab_core::detector::{assign_targets, forward, loss, Checkpoint};
use dplab_core::evalmetrics::{evaluate_split, SplitReport, Thresholds};
use dplab_core::penalise::WeightingStrategy;
use dplab_core::synthdata::{build_benchmark, DatasetSplits};
use dplab_core::trainer::{run_training, EpochStats, TrainConfig};
use dplab_core::{ModelParams64, Sample64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{benchmark_fingerprint, ExperimentConfig, Setting};
use crate::error::{io_err, HarnessError};
use crate::tables::{export_curves, mean_std};

pub const VAL_ID: &str = "val_id";
pub const VAL_OOD: &str = "val_ood";
pub const TEST_ID: &str = "test_id";
pub const TEST_OOD: &str = "test_ood";
pub const MIXED_TEST: &str = "mixed_test";

/// Splits evaluated for each setting, in report order.
pub fn eval_splits(setting: Setting) -> &'static [&'static str] {
    match setting {
        Setting::Official => &[VAL_ID, VAL_OOD, TEST_ID, TEST_OOD, MIXED_TEST],
        Setting::MixedToTest => &[MIXED_TEST],
    }
}

/// Splits `id_holdout` per domain: the first half of each domain's images
/// is val-ID, the rest test-ID.
pub fn id_halves(holdout: &[Sample64]) -> (Vec<Sample64>, Vec<Sample64>) {
    let mut by_domain: BTreeMap<usize, Vec<&Sample64>> = BTreeMap::new();
    for s in holdout {
        by_domain.entry(s.domain.index).or_default().push(s);
    }
    let (mut val, mut test) = (Vec::new(), Vec::new());
    for imgs in by_domain.values() {
        let cut = imgs.len() / 2;
        val.extend(imgs[..cut].iter().map(|s| (*s).clone()));
        test.extend(imgs[cut..].iter().map(|s| (*s).clone()));
    }
    (val, test)
}

/// Named evaluation sets derived from the benchmark.
pub struct EvalSets {
    pub sets: BTreeMap<&'static str, Vec<Sample64>>,
}

impl EvalSets {
    pub fn new(splits: &DatasetSplits<f64>) -> Self {
        let (val_id, test_id) = id_halves(&splits.id_holdout);
        let mut sets = BTreeMap::new();
        sets.insert(VAL_ID, val_id);
        sets.insert(TEST_ID, test_id);
        sets.insert(VAL_OOD, splits.official_val_ood.clone());
        sets.insert(TEST_OOD, splits.official_test_ood.clone());
        sets.insert(MIXED_TEST, splits.mixed_test.clone());
        EvalSets { sets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub setting: Setting,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitReport>,
    pub history: Vec<EpochStats<f64>>,
    /// Weights produced by the update after the last epoch.
    pub final_weights: BTreeMap<usize, f64>,
    /// Per-domain mean unweighted loss of the final model on its training set.
    pub final_train_losses: BTreeMap<usize, f64>,
    /// Relative to the report directory.
    pub checkpoint: String,
}

impl RunRecord {
    pub fn key(&self) -> String {
        run_key(&self.strategy, self.setting, self.seed)
    }

    pub fn ada(&self, split: &str) -> Option<f64> {
        self.splits.get(split).map(|r| r.ada)
    }
}

pub fn run_key(strategy: &str, setting: Setting, seed: u64) -> String {
    format!("{strategy}_{setting}_seed{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: String,
    pub setting: Setting,
    pub split: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub benchmark_fingerprint: String,
    pub config: ExperimentConfig,
    /// Source domain indices, ascending.
    pub source_domains: Vec<usize>,
    /// Source domains generated with inflated noise.
    pub hard_domains: Vec<usize>,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.into(), source })
    }

    pub fn runs_for<'a>(&'a self, strategy: &'a str, setting: Setting) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.strategy == strategy && r.setting == setting)
    }

    pub fn aggregate(&self, strategy: &str, setting: Setting, split: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy && a.setting == setting && a.split == split)
    }

    /// Strategy labels in config order.
    pub fn strategies(&self) -> Vec<String> {
        self.config.strategies.iter().map(|s| s.label()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub report_path: PathBuf,
    pub report: ExperimentReport,
}

/// Per-domain mean of the unweighted detector loss.
pub fn per_domain_loss(
    model: &ModelParams64,
    samples: &[Sample64],
    lambda: f64,
) -> Result<BTreeMap<usize, f64>, HarnessError> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let t = assign_targets(&s.gt_boxes, s.features.grid());
        let l = loss(&forward(model, &s.features)?, &t, lambda)?;
        let e = acc.entry(s.domain.index).or_default();
        e.0 += l.total;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(d, (sum, n))| (d, sum / n as f64)).collect())
}

struct Job {
    strategy: WeightingStrategy,
    setting: Setting,
    seed: u64,
}

/// Trains one (strategy, setting, seed) combination and evaluates it.
pub fn run_one(
    splits: &DatasetSplits<f64>,
    eval: &EvalSets,
    base: &TrainConfig,
    strategy: WeightingStrategy,
    setting: Setting,
    seed: u64,
    thresholds: &Thresholds,
) -> Result<(RunRecord, Checkpoint<f64>), HarnessError> {
    let cfg = TrainConfig { strategy, seed, ..base.clone() };
    let train = match setting {
        Setting::Official => &splits.official_train,
        Setting::MixedToTest => &splits.mixed_train,
    };
    let run = run_training(train, &cfg)?;
    let mut reports = BTreeMap::new();
    for &name in eval_splits(setting) {
        reports.insert(name.to_string(), evaluate_split(&run.model, &eval.sets[name], thresholds)?);
    }
    let label = strategy.label();
    let final_weights = run.weight_history.last().map(|w| w.weights.clone()).unwrap_or_default();
    let record = RunRecord {
        checkpoint: format!("checkpoints/{}.json", run_key(&label, setting, seed)),
        strategy: label,
        setting,
        seed,
        splits: reports,
        history: run.epochs,
        final_weights,
        final_train_losses: per_domain_loss(&run.model, train, cfg.lambda_reg)?,
    };
    Ok((record, run.model.to_checkpoint()))
}

/// Mean and sample std of every (strategy, setting, split) ADA across seeds.
pub fn aggregate(cfg: &ExperimentConfig, runs: &[RunRecord]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for s in &cfg.strategies {
        let label = s.label();
        for &setting in &cfg.settings {
            for &split in eval_splits(setting) {
                let values: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.strategy == label && r.setting == setting)
                    .filter_map(|r| r.ada(split))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&values);
                out.push(Aggregate { strategy: label.clone(), setting, split: split.to_string(), mean, std, values });
            }
        }
    }
    out
}

/// Runs every combination in memory. Results do not depend on thread count.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<Checkpoint<f64>>), HarnessError> {
    cfg.validate()?;
    let splits = build_benchmark::<f64>(&cfg.benchmark)?;
    let eval = EvalSets::new(&splits);
    let mut jobs = Vec::new();
    for &strategy in &cfg.strategies {
        for &setting in &cfg.settings {
            for &seed in &cfg.seeds {
                jobs.push(Job { strategy, setting, seed });
            }
        }
    }
    let results: Vec<(RunRecord, Checkpoint<f64>)> = jobs
        .par_iter()
        .map(|j| run_one(&splits, &eval, &cfg.train, j.strategy, j.setting, j.seed, &cfg.thresholds))
        .collect::<Result<_, _>>()?;
    let (runs, checkpoints): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let n_src = cfg.benchmark.n_source_domains;
    let report = ExperimentReport {
        config_hash: cfg.content_hash(),
        benchmark_fingerprint: benchmark_fingerprint(&cfg.benchmark),
        config: cfg.content(),
        source_domains: (0..n_src).collect(),
        hard_domains: (n_src - cfg.benchmark.n_hard_domains()..n_src).collect(),
        aggregates: aggregate(cfg, &runs),
        runs,
    };
    Ok((report, checkpoints))
}

/// Runs the experiment and writes `report.json`, checkpoints, curves and the
/// monotonicity summary under `<output_dir>/<hash prefix>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let root = cfg.resolve_output_dir();
    if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(HarnessError::Config(format!("output_dir parent {} does not exist", parent.display())));
        }
    }
    let (report, checkpoints) = run_in_memory(cfg)?;
    let dir = root.join(&report.config_hash[..12]);
    fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(&dir))?;
    for (run, ckpt) in report.runs.iter().zip(&checkpoints) {
        write_json(&dir.join(&run.checkpoint), ckpt)?;
    }
    let report_path = dir.join("report.json");
    fs::write(&report_path, report.to_json()).map_err(io_err(&report_path))?;
    export_curves(&report, &dir.join("curves"))?;
    Ok(ExperimentOutput { dir, report_path, report })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json { path: path.into(), source })?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}
