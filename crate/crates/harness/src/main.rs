use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dplab::config::{default_output_root, ExperimentConfig};
use dplab::error::HarnessError;
use dplab::experiment::{id_halves, run_experiment, write_json, ExperimentReport, TEST_ID, VAL_ID};
use dplab::tables::{compare, export_curves, ggap_table};
use dplab_core::detector::{Checkpoint, ModelParams};
use dplab_core::evalmetrics::{self, Pooling, Thresholds};
use dplab_core::penalise::WeightingStrategy;
use dplab_core::synthdata::{build_benchmark, read_dataset, write_dataset, BenchmarkConfig};
use dplab_core::trainer::{run_training, TrainConfig};
use dplab_core::Sample64;

#[derive(Parser)]
#[command(name = "dplab", version, about = "Domain-penalised training lab for a toy grid detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Dp,
    Erm,
    Groupdro,
}

#[derive(clap::Args)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value_t = 0.5)]
    confidence: f64,
    /// Average per-image accuracies instead of pooling counts per domain.
    #[arg(long)]
    per_image: bool,
}

impl ThresholdArgs {
    fn get(&self) -> Thresholds {
        let pooling = if self.per_image { Pooling::PerImage } else { Pooling::Pooled };
        Thresholds { iou: self.iou, confidence: self.confidence, pooling }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark and write it as JSON Lines.
    Generate {
        #[arg(long, value_enum, default_value = "desk", conflicts_with = "config")]
        preset: Preset,
        /// Benchmark config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model on a split of a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "official_train")]
        split: String,
        /// Training config JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Directory for checkpoint.json and history.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset split, or val_id / test_id.
        #[arg(long, default_value = "official_test_ood")]
        split: String,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the decoded detections as JSON Lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write the ground truth as JSON Lines.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Score a prediction file against a ground-truth file.
    Score {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Tabulate ADA mean (std) per strategy across reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Writes <out>.csv and <out>.json; prints CSV otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-domain generalisation gaps on the mixed-test images.
    Ggap {
        #[arg(long)]
        official: PathBuf,
        /// Defaults to the official report.
        #[arg(long)]
        mixed: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export loss curves and the monotonicity summary.
    Curves {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the shipped preset end to end and write every table.
    Demo {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use the tiny smoke configuration instead.
        #[arg(long)]
        smoke: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::ConfigParse { path: path.into(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|source| HarnessError::Io { path: path.into(), source })
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn load_split(data: &Path, name: &str) -> Result<Vec<Sample64>, HarnessError> {
    let (splits, _) = read_dataset::<f64>(data)?;
    let samples = match name {
        VAL_ID => id_halves(&splits.id_holdout).0,
        TEST_ID => id_halves(&splits.id_holdout).1,
        _ => splits.split(name).ok_or_else(|| HarnessError::Config(format!("unknown split {name:?}")))?.to_vec(),
    };
    if samples.is_empty() {
        return Err(HarnessError::Config(format!("split {name:?} is empty")));
    }
    Ok(samples)
}

fn run_demo(output_dir: Option<PathBuf>, smoke: bool) -> Result<(), HarnessError> {
    let mut cfg = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::demo() };
    cfg.output_dir = Some(output_dir.unwrap_or_else(|| default_output_root().join("demo")));
    if let Some(root) = &cfg.output_dir {
        fs::create_dir_all(root).map_err(|source| HarnessError::Io { path: root.clone(), source })?;
    }
    let out = run_experiment(&cfg)?;
    let table = compare(std::slice::from_ref(&out.report))?;
    write_text(&out.dir.join("compare.csv"), &table.to_csv())?;
    write_json(&out.dir.join("compare.json"), &table)?;
    let gaps = ggap_table(&out.report, &out.report)?;
    write_text(&out.dir.join("ggap.csv"), &gaps.to_csv())?;
    write_json(&out.dir.join("ggap.json"), &gaps)?;
    print!("{}", table.to_csv());
    println!("report: {}", out.report_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Generate { preset, config, out } => {
            let cfg: BenchmarkConfig = match config {
                Some(p) => read_json(&p)?,
                None => match preset {
                    Preset::Desk => BenchmarkConfig::desk_preset(),
                    Preset::Smoke => BenchmarkConfig::smoke_preset(),
                },
            };
            let out = out.unwrap_or_else(|| default_output_root().join("dataset"));
            let splits = build_benchmark::<f64>(&cfg)?;
            write_dataset(&splits, Some(&cfg), &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Train { data, split, config, strategy, seed, epochs, lr, out } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = strategy {
                cfg.strategy = match s {
                    StrategyArg::Dp => WeightingStrategy::dp(),
                    StrategyArg::Erm => WeightingStrategy::erm(),
                    StrategyArg::Groupdro => WeightingStrategy::group_dro(),
                };
            }
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            let samples = load_split(&data, &split)?;
            let run = run_training(&samples, &cfg)?;
            fs::create_dir_all(&out).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            write_json(&out.join("checkpoint.json"), &run.model.to_checkpoint())?;
            write_json(&out.join("history.json"), &run.epochs)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { data, checkpoint, split, thresholds, out, predictions, ground_truth } => {
            let ckpt: Checkpoint<f64> = read_json(&checkpoint)?;
            let model = ModelParams::from_checkpoint(&ckpt)?;
            let samples = load_split(&data, &split)?;
            let th = thresholds.get();
            if let Some(p) = predictions {
                let preds = samples
                    .iter()
                    .map(|s| Ok((s.image_id, evalmetrics::predict(&model, s, th.confidence)?)))
                    .collect::<Result<Vec<_>, HarnessError>>()?;
                evalmetrics::write_predictions(&preds, &p)?;
            }
            if let Some(g) = ground_truth {
                evalmetrics::write_ground_truth(&samples, &g)?;
            }
            let report = evalmetrics::evaluate_split(&model, &samples, &th)?;
            emit(&report, out.as_deref())?;
        }
        Cmd::Score { gt, pred, thresholds, out } => {
            let report = evalmetrics::score_files::<f64>(&gt, &pred, &thresholds.get())?;
            emit(&report, out.as_deref())?;
        }
        Cmd::Run { config, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let out = run_experiment(&cfg)?;
            println!("report: {}", out.report_path.display());
        }
        Cmd::Compare { reports, out } => {
            let reports = reports.iter().map(|p| ExperimentReport::load(p)).collect::<Result<Vec<_>, _>>()?;
            let table = compare(&reports)?;
            match out {
                Some(prefix) => {
                    write_text(&with_ext(&prefix, "csv"), &table.to_csv())?;
                    write_json(&with_ext(&prefix, "json"), &table)?;
                }
                None => print!("{}", table.to_csv()),
            }
        }
        Cmd::Ggap { official, mixed, out } => {
            let off = ExperimentReport::load(&official)?;
            let mix = match mixed {
                Some(p) => ExperimentReport::load(&p)?,
                None => off.clone(),
            };
            let table = ggap_table(&off, &mix)?;
            match out {
                Some(prefix) => {
                    write_text(&with_ext(&prefix, "csv"), &table.to_csv())?;
                    write_json(&with_ext(&prefix, "json"), &table)?;
                }
                None => print!("{}", table.to_csv()),
            }
        }
        Cmd::Curves { report, out } => {
            let summary = export_curves(&ExperimentReport::load(&report)?, &out)?;
            for (k, f) in &summary.per_strategy {
                println!("{k}: {:.3} of domains monotone", f);
            }
        }
        Cmd::Demo { output_dir, smoke } => run_demo(output_dir, smoke)?,
    }
    Ok(())
}

fn emit(report: &evalmetrics::SplitReport, out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(p) => write_json(p, report),
        None => {
            println!("{}", serde_json::to_string_pretty(report).expect("report serialises"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
