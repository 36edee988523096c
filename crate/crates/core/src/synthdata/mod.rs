//! Synthetic multi-source detection benchmark.
//!
//! Each domain is a draw of [`DomainParams`]: an affine feature transform,
//! a bias, a noise level and object count/size ranges. Source domains come
//! from a fixed hyper-distribution; out-of-distribution domains reuse the same
//! random draws displaced by `shift_severity`, so a zero shift reproduces the
//! source distribution exactly.
//!
//! Splits follow an official/mixed topology: official train, OOD validation and
//! OOD test domains are disjoint; the mixed train split adds the first half of
//! every OOD domain's images to official train, and mixed test holds the rest.

mod generate;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainId, Sample};

pub use generate::{build_benchmark, derive_seed, generate_domain, sample_domain_params};
pub use io::{read_dataset, write_dataset, DatasetError, Manifest, SplitEntry};

/// Image ids are `domain_index * IMAGE_ID_STRIDE + position`.
pub const IMAGE_ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    /// Source domain with elevated noise.
    HardSource,
    ValOod,
    TestOod,
}

impl DomainRole {
    pub fn is_ood(self) -> bool {
        matches!(self, DomainRole::ValOod | DomainRole::TestOod)
    }

    pub fn is_source(self) -> bool {
        !self.is_ood()
    }

    fn label_prefix(self) -> &'static str {
        match self {
            DomainRole::Source | DomainRole::HardSource => "src",
            DomainRole::ValOod => "val",
            DomainRole::TestOod => "test",
        }
    }
}

/// Generative parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams<T> {
    pub domain: DomainId,
    pub role: DomainRole,
    /// `F x F`, row-major.
    pub feature_transform: Vec<T>,
    pub feature_bias: Vec<T>,
    pub noise_sigma: T,
    /// Inclusive `[lo, hi]`.
    pub object_count_range: (usize, usize),
    /// Inclusive `[lo, hi]` side length in grid units.
    pub object_size_range: (T, T),
    /// Maximum offset of an object centre from its cell centre, in `[0, 0.5)`.
    pub center_jitter: T,
    pub base_signature: Vec<T>,
}

/// Knobs of the source hyper-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainHyper {
    /// Ceiling on the Frobenius norm of `transform - I` for source domains.
    pub transform_jitter: f64,
    pub bias_scale: f64,
    /// Scale of the shared object signature.
    pub signature_scale: f64,
    /// Per-domain perturbation of the signature.
    pub signature_jitter: f64,
    pub noise_sigma: f64,
    /// Relative spread of the per-domain noise level.
    pub noise_jitter: f64,
    pub hard_noise_factor: f64,
    /// OOD noise is multiplied by `1 + ood_noise_gain * shift_severity`.
    pub ood_noise_gain: f64,
    /// OOD object sizes are multiplied by `1 + ood_size_gain * shift_severity`.
    pub ood_size_gain: f64,
    /// OOD count ceilings grow by `round(ood_count_gain * shift_severity)`.
    pub ood_count_gain: f64,
    pub object_count: (usize, usize),
    pub object_size: (f64, f64),
    /// Maximum displacement of an object centre from its cell centre; below 0.5.
    pub center_jitter: f64,
}

impl Default for DomainHyper {
    fn default() -> Self {
        DomainHyper {
            transform_jitter: 0.4,
            bias_scale: 0.3,
            signature_scale: 2.5,
            signature_jitter: 0.15,
            noise_sigma: 0.5,
            noise_jitter: 0.1,
            hard_noise_factor: 2.5,
            ood_noise_gain: 2.0,
            ood_size_gain: 0.05,
            ood_count_gain: 0.5,
            object_count: (1, 4),
            object_size: (0.7, 1.0),
            center_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_source_domains: usize,
    pub n_val_ood_domains: usize,
    pub n_test_ood_domains: usize,
    /// Training images per source domain, and total images per OOD domain.
    pub images_per_domain: usize,
    /// Per-domain overrides keyed by global domain index.
    #[serde(default)]
    pub images_per_domain_overrides: BTreeMap<usize, usize>,
    /// Extra held-out images per source domain (in-distribution evaluation).
    #[serde(default = "default_holdout")]
    pub holdout_images_per_domain: usize,
    pub grid_size: usize,
    pub feature_dim: usize,
    pub shift_severity: f64,
    pub hard_domain_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub hyper: DomainHyper,
}

fn default_holdout() -> usize {
    10
}

impl BenchmarkConfig {
    /// Desk-scale preset used by `demo`.
    pub fn desk_preset() -> Self {
        BenchmarkConfig {
            n_source_domains: 6,
            n_val_ood_domains: 2,
            n_test_ood_domains: 3,
            images_per_domain: 40,
            images_per_domain_overrides: BTreeMap::new(),
            holdout_images_per_domain: 10,
            grid_size: 8,
            feature_dim: 6,
            shift_severity: 1.0,
            hard_domain_fraction: 1.0 / 3.0,
            seed: 2021,
            hyper: DomainHyper::default(),
        }
    }

    /// 2 source domains x 8 images, `G = 6`, `F = 4`.
    pub fn smoke_preset() -> Self {
        BenchmarkConfig {
            n_source_domains: 2,
            n_val_ood_domains: 1,
            n_test_ood_domains: 1,
            images_per_domain: 8,
            images_per_domain_overrides: BTreeMap::new(),
            holdout_images_per_domain: 4,
            grid_size: 6,
            feature_dim: 4,
            shift_severity: 1.0,
            hard_domain_fraction: 0.5,
            seed: 7,
            hyper: DomainHyper::default(),
        }
    }

    pub fn n_domains(&self) -> usize {
        self.n_source_domains + self.n_val_ood_domains + self.n_test_ood_domains
    }

    pub fn n_hard_domains(&self) -> usize {
        (self.hard_domain_fraction * self.n_source_domains as f64).round() as usize
    }

    /// Role of the domain with the given global index. Sources come first, and the
    /// last [`n_hard_domains`](Self::n_hard_domains) of them are hard.
    pub fn role_of(&self, index: usize) -> DomainRole {
        let ns = self.n_source_domains;
        if index < ns {
            if index >= ns - self.n_hard_domains().min(ns) {
                DomainRole::HardSource
            } else {
                DomainRole::Source
            }
        } else if index < ns + self.n_val_ood_domains {
            DomainRole::ValOod
        } else {
            DomainRole::TestOod
        }
    }

    pub fn domain_id(&self, index: usize) -> DomainId {
        let role = self.role_of(index);
        let local = match role {
            DomainRole::Source | DomainRole::HardSource => index,
            DomainRole::ValOod => index - self.n_source_domains,
            DomainRole::TestOod => index - self.n_source_domains - self.n_val_ood_domains,
        };
        DomainId { index, label: format!("{}_{:02}", role.label_prefix(), local) }
    }

    pub fn images_for(&self, index: usize) -> usize {
        self.images_per_domain_overrides.get(&index).copied().unwrap_or(self.images_per_domain)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.n_source_domains < 2 {
            return bad(format!("n_source_domains must be >= 2, got {}", self.n_source_domains));
        }
        if self.n_val_ood_domains < 1 || self.n_test_ood_domains < 1 {
            return bad("need at least one validation and one test OOD domain".into());
        }
        if self.images_per_domain < 1 || self.images_per_domain_overrides.values().any(|&n| n < 1) {
            return bad("image counts must be >= 1".into());
        }
        if let Some(idx) = self.images_per_domain_overrides.keys().find(|&&k| k >= self.n_domains()) {
            return bad(format!("override for unknown domain {idx}"));
        }
        if (0..self.n_domains())
            .any(|d| (self.images_for(d) + self.holdout_images_per_domain) as u64 >= IMAGE_ID_STRIDE)
        {
            return bad("too many images in one domain".into());
        }
        if self.holdout_images_per_domain < 1 {
            return bad("holdout_images_per_domain must be >= 1".into());
        }
        if self.grid_size < 2 {
            return bad(format!("grid_size must be >= 2, got {}", self.grid_size));
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1".into());
        }
        if !(self.shift_severity.is_finite() && self.shift_severity >= 0.0) {
            return bad("shift_severity must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.hard_domain_fraction) {
            return bad("hard_domain_fraction must lie in [0, 1]".into());
        }
        let h = &self.hyper;
        let g = self.grid_size as f64;
        let finite_nonneg = [
            h.transform_jitter,
            h.bias_scale,
            h.signature_scale,
            h.signature_jitter,
            h.noise_sigma,
            h.noise_jitter,
            h.ood_noise_gain,
            h.ood_size_gain,
            h.ood_count_gain,
        ];
        if finite_nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("hyper-parameters must be finite and >= 0".into());
        }
        if h.noise_jitter >= 1.0 {
            return bad("noise_jitter must be < 1".into());
        }
        if !(h.hard_noise_factor.is_finite() && h.hard_noise_factor >= 1.0) {
            return bad("hard_noise_factor must be >= 1".into());
        }
        if h.object_count.0 > h.object_count.1 {
            return bad("object_count lo > hi".into());
        }
        if h.object_count.1 > self.grid_size * self.grid_size {
            return bad("object_count exceeds grid capacity".into());
        }
        let (slo, shi) = h.object_size;
        if !(slo > 0.0 && slo <= shi && shi <= g) {
            return bad(format!("object_size must satisfy 0 < lo <= hi <= {g}"));
        }
        if !(0.0..0.5).contains(&h.center_jitter) {
            return bad("center_jitter must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid benchmark config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot place {objects} objects on a {grid}x{grid} grid")]
    Capacity { objects: usize, grid: usize },
    #[error("invalid domain parameters: {0}")]
    Params(String),
    #[error("n_images must be >= 1")]
    NoImages,
}

/// The six benchmark splits plus the domain registry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits<T> {
    pub official_train: Vec<Sample<T>>,
    pub official_val_ood: Vec<Sample<T>>,
    pub official_test_ood: Vec<Sample<T>>,
    pub id_holdout: Vec<Sample<T>>,
    pub mixed_train: Vec<Sample<T>>,
    pub mixed_test: Vec<Sample<T>>,
    pub domain_registry: Vec<DomainParams<T>>,
}

/// Names of the six splits, in file order.
pub const SPLIT_NAMES: [&str; 6] =
    ["official_train", "official_val_ood", "official_test_ood", "id_holdout", "mixed_train", "mixed_test"];

impl<T> DatasetSplits<T> {
    pub fn split(&self, name: &str) -> Option<&[Sample<T>]> {
        Some(match name {
            "official_train" => &self.official_train,
            "official_val_ood" => &self.official_val_ood,
            "official_test_ood" => &self.official_test_ood,
            "id_holdout" => &self.id_holdout,
            "mixed_train" => &self.mixed_train,
            "mixed_test" => &self.mixed_test,
            _ => return None,
        })
    }

    pub(crate) fn split_mut(&mut self, name: &str) -> Option<&mut Vec<Sample<T>>> {
        Some(match name {
            "official_train" => &mut self.official_train,
            "official_val_ood" => &mut self.official_val_ood,
            "official_test_ood" => &mut self.official_test_ood,
            "id_holdout" => &mut self.id_holdout,
            "mixed_train" => &mut self.mixed_train,
            "mixed_test" => &mut self.mixed_test,
            _ => return None,
        })
    }

    pub fn params(&self, index: usize) -> Option<&DomainParams<T>> {
        self.domain_registry.iter().find(|p| p.domain.index == index)
    }
}
