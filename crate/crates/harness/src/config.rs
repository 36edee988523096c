use std::fs;
use std::path::{Path, PathBuf};

use dplab_core::evalmetrics::Thresholds;
use dplab_core::penalise::WeightingStrategy;
use dplab_core::synthdata::BenchmarkConfig;
use dplab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DPLAB_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Train on the source domains, evaluate ID and OOD.
    Official,
    /// Train on sources plus part of every OOD domain, evaluate on the rest.
    MixedToTest,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Official => "official",
            Setting::MixedToTest => "mixed_to_test",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<WeightingStrategy>,
    /// Training seeds; the benchmark itself is fixed by `benchmark.seed`.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Falls back to `$DPLAB_OUTPUT_ROOT`, then `dplab-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_strategies() -> Vec<WeightingStrategy> {
    vec![WeightingStrategy::dp(), WeightingStrategy::erm(), WeightingStrategy::group_dro()]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_settings() -> Vec<Setting> {
    vec![Setting::Official, Setting::MixedToTest]
}

/// Learning rate of the shipped preset. The toy detector has a few dozen
/// parameters and sees a few hundred images per epoch, so 12 epochs at 1e-4
/// barely move it.
pub const DEMO_LEARNING_RATE: f64 = 0.02;

impl ExperimentConfig {
    pub fn new(benchmark: BenchmarkConfig, train: TrainConfig) -> Self {
        ExperimentConfig {
            benchmark,
            train,
            strategies: default_strategies(),
            seeds: default_seeds(),
            settings: default_settings(),
            thresholds: Thresholds::default(),
            output_dir: None,
        }
    }

    /// The desk preset with all three strategies, three seeds and both settings.
    pub fn demo() -> Self {
        let train = TrainConfig { learning_rate: DEMO_LEARNING_RATE, ..TrainConfig::default() };
        Self::new(BenchmarkConfig::desk_preset(), train)
    }

    /// A tiny configuration that runs in well under a second.
    pub fn smoke() -> Self {
        let train = TrainConfig { learning_rate: DEMO_LEARNING_RATE, epochs: 3, ..TrainConfig::default() };
        ExperimentConfig { seeds: vec![0], ..Self::new(BenchmarkConfig::smoke_preset(), train) }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|source| HarnessError::ConfigParse { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(HarnessError::Config("at least one strategy is required".into()));
        }
        for s in &self.strategies {
            s.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let mut labels: Vec<String> = self.strategies.iter().map(|s| s.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.strategies.len() {
            return Err(HarnessError::Config("strategies must have distinct labels".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.settings.is_empty() {
            return Err(HarnessError::Config("settings must not be empty".into()));
        }
        let th = &self.thresholds;
        if !((0.0..=1.0).contains(&th.iou) && (0.0..=1.0).contains(&th.confidence)) {
            return Err(HarnessError::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The same config without the output location, which does not affect results.
    pub fn content(&self) -> Self {
        ExperimentConfig { output_dir: None, ..self.clone() }
    }

    /// Hex SHA-256 of the canonical JSON of [`Self::content`].
    pub fn content_hash(&self) -> String {
        sha256_json(&self.content())
    }

    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_root)
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("dplab-out"))
}

/// Identifies the generated data, so reports over different data are not mixed.
pub fn benchmark_fingerprint(b: &BenchmarkConfig) -> String {
    sha256_json(b)
}

fn sha256_json<S: Serialize>(v: &S) -> String {
    let bytes = serde_json::to_vec(v).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))
}
