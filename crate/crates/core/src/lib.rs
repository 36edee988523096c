//! Domain-penalised training of a toy grid detector on synthetic
//! multi-domain data, with ERM and GroupDRO baselines and WiLDS-style
//! detection accuracy.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar for the common cases.

pub mod detector;
pub mod domain;
pub mod evalmetrics;
pub mod penalise;
pub mod scalar;
pub mod synthdata;
pub mod trainer;

pub use domain::{BBox, Detection, DomainError, DomainId, FeatureGrid, Sample, SampleViolation};
pub use scalar::Scalar;

pub type BBox64 = domain::BBox<f64>;
pub type BBox32 = domain::BBox<f32>;
pub type Sample64 = domain::Sample<f64>;
pub type Sample32 = domain::Sample<f32>;
pub type Detection64 = domain::Detection<f64>;
pub type Detection32 = domain::Detection<f32>;
pub type ModelParams64 = detector::ModelParams<f64>;
pub type ModelParams32 = detector::ModelParams<f32>;
pub type DomainWeights64 = penalise::DomainWeights<f64>;
pub type DomainWeights32 = penalise::DomainWeights<f32>;
pub type DatasetSplits64 = synthdata::DatasetSplits<f64>;
pub type DatasetSplits32 = synthdata::DatasetSplits<f32>;
pub type TrainingRun64 = trainer::TrainingRun<f64>;
pub type TrainingRun32 = trainer::TrainingRun<f32>;
