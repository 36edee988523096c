//! Per-domain loss accounting and penalisation weights.
//!
//! During an epoch every unweighted per-image loss is recorded per domain; at
//! the end of the epoch the domain averages become the next epoch's weights.
//! Domain penalisation (DP) uses a softmax over the averages, so domains with
//! higher loss get larger weights. ERM keeps the weights uniform. GroupDRO runs
//! one exponentiated-gradient ascent step.
//!
//! Within a batch each image's loss is scaled by its domain's weight and the
//! scaled losses are summed in batch order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PenaliseError {
    #[error("at least one domain is required")]
    NoDomains,
    #[error("non-finite loss {value} for domain {domain}")]
    NonFiniteLoss { domain: usize, value: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("domain {0} has no weight")]
    UnknownDomain(usize),
    #[error("empty loss table")]
    EmptyAverages,
    #[error("invalid strategy: {0}")]
    Strategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Weights sum to one.
    UnitSum,
    /// Weights sum to the number of domains, matching the unit initial weights.
    #[default]
    DomainCount,
}

impl ScaleMode {
    pub fn target<T: Scalar>(self, n_domains: usize) -> T {
        match self {
            ScaleMode::UnitSum => T::one(),
            ScaleMode::DomainCount => T::from_count(n_domains),
        }
    }
}

/// Per-domain weights for one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights<T> {
    pub weights: BTreeMap<usize, T>,
    /// The training epoch these weights are used in; epoch 0 weights are all one.
    pub epoch: usize,
    pub scale_mode: ScaleMode,
}

impl<T: Scalar> DomainWeights<T> {
    /// Unit weights for the listed domain indices.
    pub fn unity(domains: impl IntoIterator<Item = usize>, scale_mode: ScaleMode) -> Result<Self, PenaliseError> {
        let weights: BTreeMap<usize, T> = domains.into_iter().map(|d| (d, T::one())).collect();
        if weights.is_empty() {
            return Err(PenaliseError::NoDomains);
        }
        Ok(DomainWeights { weights, epoch: 0, scale_mode })
    }

    pub fn get(&self, domain: usize) -> Option<T> {
        self.weights.get(&domain).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> T {
        self.weights.values().copied().sum()
    }
}

/// Unit weights for domains `0..n_domains`.
pub fn init_weights<T: Scalar>(n_domains: usize) -> Result<DomainWeights<T>, PenaliseError> {
    DomainWeights::unity(0..n_domains, ScaleMode::default())
}

/// Running per-domain sums and counts of unweighted per-image losses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainLossAccumulator<T> {
    pub sum_loss: BTreeMap<usize, T>,
    pub count: BTreeMap<usize, usize>,
}

impl<T: Scalar> DomainLossAccumulator<T> {
    pub fn new() -> Self {
        DomainLossAccumulator { sum_loss: BTreeMap::new(), count: BTreeMap::new() }
    }

    pub fn record(&mut self, domain: usize, loss: T) -> Result<(), PenaliseError> {
        if !loss.is_finite() {
            return Err(PenaliseError::NonFiniteLoss { domain, value: loss.as_f64() });
        }
        let slot = self.sum_loss.entry(domain).or_insert_with(T::zero);
        *slot = *slot + loss;
        *self.count.entry(domain).or_insert(0) += 1;
        Ok(())
    }

    pub fn count_of(&self, domain: usize) -> usize {
        self.count.get(&domain).copied().unwrap_or(0)
    }

    pub fn sum_of(&self, domain: usize) -> T {
        self.sum_loss.get(&domain).copied().unwrap_or_else(T::zero)
    }
}

pub fn record_loss<T: Scalar>(acc: &mut DomainLossAccumulator<T>, domain: usize, loss: T) -> Result<(), PenaliseError> {
    acc.record(domain, loss)
}

/// Mean loss of every domain with at least one record.
pub fn average_domain_losses<T: Scalar>(acc: &DomainLossAccumulator<T>) -> BTreeMap<usize, T> {
    acc.count.iter().filter(|(_, &n)| n > 0).map(|(&d, &n)| (d, acc.sum_of(d) / T::from_count(n))).collect()
}

fn softmax_values<T: Scalar>(logits: &BTreeMap<usize, T>) -> BTreeMap<usize, T> {
    let max = logits.values().copied().fold(T::neg_infinity(), T::max);
    let exps: BTreeMap<usize, T> = logits.iter().map(|(&d, &v)| (d, (v - max).exp())).collect();
    let total: T = exps.values().copied().sum();
    exps.into_iter().map(|(d, e)| (d, e / total)).collect()
}

fn check_table<T: Scalar>(avg: &BTreeMap<usize, T>) -> Result<(), PenaliseError> {
    if avg.is_empty() {
        return Err(PenaliseError::EmptyAverages);
    }
    if let Some((&d, v)) = avg.iter().find(|(_, v)| !v.is_finite()) {
        return Err(PenaliseError::NonFiniteLoss { domain: d, value: v.as_f64() });
    }
    Ok(())
}

/// `w_i = exp(L_i / T) / sum_j exp(L_j / T)`, scaled to the mode's target sum.
/// The returned `epoch` is zero; [`epoch_update`] sets it.
pub fn softmax_weights<T: Scalar>(
    avg: &BTreeMap<usize, T>,
    temperature: T,
    scale_mode: ScaleMode,
) -> Result<DomainWeights<T>, PenaliseError> {
    check_table(avg)?;
    if !(temperature > T::zero() && temperature.is_finite()) {
        return Err(PenaliseError::Strategy("temperature must be positive and finite".into()));
    }
    let scaled: BTreeMap<usize, T> = avg.iter().map(|(&d, &v)| (d, v / temperature)).collect();
    let target: T = scale_mode.target(avg.len());
    let weights = softmax_values(&scaled).into_iter().map(|(d, w)| (d, w * target)).collect();
    Ok(DomainWeights { weights, epoch: 0, scale_mode })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossResult<T> {
    pub total: T,
    pub per_image_weight: Vec<T>,
}

/// Weighted sum of per-image losses, accumulated in batch order.
pub fn batch_loss<T: Scalar>(
    losses: &[(usize, T)],
    weights: &DomainWeights<T>,
) -> Result<BatchLossResult<T>, PenaliseError> {
    if losses.is_empty() {
        return Err(PenaliseError::EmptyBatch);
    }
    let mut total = T::zero();
    let mut per_image_weight = Vec::with_capacity(losses.len());
    for &(d, l) in losses {
        let w = weights.get(d).ok_or(PenaliseError::UnknownDomain(d))?;
        total = total + w * l;
        per_image_weight.push(w);
    }
    Ok(BatchLossResult { total, per_image_weight })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "dp")]
    DomainPenalisation,
    Erm,
    #[serde(rename = "groupdro")]
    GroupDro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingStrategy {
    pub kind: StrategyKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// Keep the initial unit weights for the whole run (ablation).
    #[serde(default)]
    pub frozen: bool,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    0.01
}

impl WeightingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        WeightingStrategy {
            kind,
            temperature: default_temperature(),
            eta: default_eta(),
            scale_mode: ScaleMode::default(),
            frozen: false,
        }
    }

    pub fn dp() -> Self {
        Self::new(StrategyKind::DomainPenalisation)
    }

    pub fn erm() -> Self {
        Self::new(StrategyKind::Erm)
    }

    pub fn group_dro() -> Self {
        Self::new(StrategyKind::GroupDro)
    }

    pub fn with_scale_mode(mut self, scale_mode: ScaleMode) -> Self {
        self.scale_mode = scale_mode;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn validate(&self) -> Result<(), PenaliseError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PenaliseError::Strategy(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PenaliseError::Strategy(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Short stable name, e.g. `dp`, `erm`, `groupdro`, `dp-frozen`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            StrategyKind::DomainPenalisation => "dp",
            StrategyKind::Erm => "erm",
            StrategyKind::GroupDro => "groupdro",
        };
        let mut s = base.to_string();
        if self.scale_mode == ScaleMode::UnitSum {
            s.push_str("-unitsum");
        }
        if self.frozen {
            s.push_str("-frozen");
        }
        s
    }
}

/// Rescale `prev` to the target sum, then give the domains seen this epoch the
/// mass left over by the unseen ones, split proportionally to `proposal`.
fn merge_with_unseen<T: Scalar>(
    prev: &DomainWeights<T>,
    proposal: &BTreeMap<usize, T>,
    target: T,
) -> BTreeMap<usize, T> {
    let prev_sum = prev.sum();
    let carried = |w: T| w * target / prev_sum;
    let unseen_mass: T = prev.weights.iter().filter(|(d, _)| !proposal.contains_key(d)).map(|(_, &w)| carried(w)).sum();
    let seen_mass = target - unseen_mass;
    let proposal_sum: T = proposal.values().copied().sum();
    prev.weights
        .iter()
        .map(|(&d, &w)| match proposal.get(&d) {
            Some(&p) => (d, seen_mass * p / proposal_sum),
            None => (d, carried(w)),
        })
        .collect()
}

/// End-of-epoch weight update. Domains absent from `acc` keep their previous
/// (rescaled) weight.
pub fn epoch_update<T: Scalar>(
    strategy: &WeightingStrategy,
    prev: &DomainWeights<T>,
    acc: &DomainLossAccumulator<T>,
) -> Result<DomainWeights<T>, PenaliseError> {
    strategy.validate()?;
    if prev.is_empty() {
        return Err(PenaliseError::NoDomains);
    }
    let n = prev.len();
    let target: T = strategy.scale_mode.target(n);
    let next_epoch = prev.epoch + 1;
    if strategy.frozen {
        return Ok(DomainWeights { weights: prev.weights.clone(), epoch: next_epoch, scale_mode: strategy.scale_mode });
    }
    let avg: BTreeMap<usize, T> =
        average_domain_losses(acc).into_iter().filter(|(d, _)| prev.weights.contains_key(d)).collect();
    let weights = match strategy.kind {
        StrategyKind::Erm => {
            let w = target / T::from_count(n);
            prev.weights.keys().map(|&d| (d, w)).collect()
        }
        StrategyKind::DomainPenalisation => {
            if avg.is_empty() {
                merge_with_unseen(prev, &BTreeMap::new(), target)
            } else {
                let sm = softmax_weights(&avg, T::lit(strategy.temperature), ScaleMode::UnitSum)?;
                merge_with_unseen(prev, &sm.weights, target)
            }
        }
        StrategyKind::GroupDro => {
            if !avg.is_empty() {
                check_table(&avg)?;
            }
            let eta = T::lit(strategy.eta);
            let logits: BTreeMap<usize, T> = avg.iter().map(|(&d, &l)| (d, prev.weights[&d].ln() + eta * l)).collect();
            let proposal = if logits.is_empty() { logits } else { softmax_values(&logits) };
            merge_with_unseen(prev, &proposal, target)
        }
    };
    Ok(DomainWeights { weights, epoch: next_epoch, scale_mode: strategy.scale_mode })
}
