use std::path::PathBuf;

use dplab_core::detector::DetectorError;
use dplab_core::evalmetrics::MetricsError;
use dplab_core::synthdata::{ConfigError, DatasetError, GenerationError};
use dplab_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.0)
    }
}

impl HarnessError {
    /// 2 for bad configuration or mismatched inputs, 3 for everything that
    /// went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigParse { .. } | HarnessError::Mismatch(_) => 2,
            HarnessError::Generation(GenerationError::Config(_)) => 2,
            HarnessError::Train(TrainError::Config(_)) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
