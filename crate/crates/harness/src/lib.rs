//! Experiment orchestration: multi-seed runs over strategies and settings,
//! ID/OOD evaluation, comparison and gap tables, loss-curve exports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod tables;

pub use config::{ExperimentConfig, Setting};
pub use error::HarnessError;
pub use experiment::{run_experiment, run_in_memory, ExperimentOutput, ExperimentReport, RunRecord};
