//! Adam and the epoch/batch training loop.
//!
//! One epoch is a shuffled pass over the training split in batches of
//! `batch_size` (the last short batch is kept). For every batch the per-image
//! losses are weighted by their domain's current weight, summed, divided by the
//! batch length, and back-propagated; Adam then takes one step. The unweighted
//! per-image losses feed the domain accumulator, and the active strategy turns
//! it into the next epoch's weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{self, assign_targets, init_params, DetectorError, ModelParams, TargetGrid};
use crate::domain::Sample;
use crate::penalise::{
    self, batch_loss, epoch_update, DomainLossAccumulator, DomainWeights, PenaliseError, WeightingStrategy,
};
use crate::scalar::Scalar;
use crate::synthdata::derive_seed;

const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_SHUFFLE: u64 = 0x5348_5546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite gradient at epoch {epoch}, step {step} (tensor {tensor})")]
    NonFiniteGradient { epoch: usize, step: usize, tensor: String },
    #[error("non-finite loss for image {image_id} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, image_id: u64 },
    #[error("gradient shape does not match parameters")]
    GradientShape,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Penalise(#[from] PenaliseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// A shuffled pass over all images.
    #[default]
    Uniform,
    /// Round-robin over domains, each domain's images shuffled.
    DomainBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub strategy: WeightingStrategy,
    pub sampler: Sampler,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Width of the optional tanh hidden layer; 0 disables it.
    pub hidden_units: usize,
    /// Keep every per-image loss in the epoch stats.
    pub record_image_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 12,
            lambda_reg: 1.0,
            strategy: WeightingStrategy::dp(),
            sampler: Sampler::Uniform,
            seed: 0,
            adam: AdamConfig::default(),
            hidden_units: 0,
            record_image_losses: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda_reg must be finite and >= 0".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.strategy.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(like: &ModelParams<T>) -> Self {
        AdamState { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    learning_rate: T,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(TrainError::GradientShape);
    }
    if let Some((name, _, _)) = grads.named_slices().into_iter().find(|(_, _, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFiniteGradient { epoch: 0, step: state.t as usize, tensor: name.to_string() });
    }
    state.t += 1;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    let t = state.t as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let g = grads.to_flat();
    let mut m = state.m.to_flat();
    let mut v = state.v.to_flat();
    let mut p = params.to_flat();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] - learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    state.m.set_flat(&m);
    state.v.set_flat(&v);
    params.set_flat(&p);
    Ok(())
}

/// One unweighted per-image loss, as recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss<T> {
    pub image_id: u64,
    pub domain: usize,
    pub loss: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats<T> {
    pub epoch: usize,
    pub per_domain_avg_loss: BTreeMap<usize, T>,
    pub weights_used: DomainWeights<T>,
    /// Mean over batches of the weighted batch loss divided by batch length.
    pub mean_batch_loss: T,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_losses: Vec<ImageLoss<T>>,
}

/// Training progress notifications.
pub enum TrainEvent<'a, T> {
    Step { epoch: usize, step: usize, params: &'a ModelParams<T> },
    EpochEnd { stats: &'a EpochStats<T>, params: &'a ModelParams<T>, next_weights: &'a DomainWeights<T> },
}

/// Visiting order of the training images for one epoch.
pub fn epoch_order<T>(samples: &[Sample<T>], sampler: Sampler, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE, epoch as u64));
    match sampler {
        Sampler::Uniform => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order
        }
        Sampler::DomainBalanced => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in samples.iter().enumerate() {
                groups.entry(s.domain.index).or_default().push(i);
            }
            let mut queues: Vec<std::vec::IntoIter<usize>> = groups
                .into_values()
                .map(|mut g| {
                    g.shuffle(&mut rng);
                    g.into_iter()
                })
                .collect();
            let mut order = Vec::with_capacity(samples.len());
            while order.len() < samples.len() {
                for q in queues.iter_mut() {
                    if let Some(i) = q.next() {
                        order.push(i);
                    }
                }
            }
            order
        }
    }
}

/// Result of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome<T> {
    pub accumulator: DomainLossAccumulator<T>,
    pub stats: EpochStats<T>,
}

/// Precomputed anchor targets, aligned with the training samples.
pub fn targets_for<T: Scalar>(samples: &[Sample<T>]) -> Vec<TargetGrid<T>> {
    samples.iter().map(|s| assign_targets(&s.gt_boxes, s.features.grid())).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar>(
    model: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample<T>],
    targets: &[TargetGrid<T>],
    weights: &DomainWeights<T>,
    cfg: &TrainConfig,
    epoch: usize,
    observer: &mut dyn FnMut(TrainEvent<'_, T>),
) -> Result<EpochOutcome<T>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let lambda = T::lit(cfg.lambda_reg);
    let lr = T::lit(cfg.learning_rate);
    let order = epoch_order(samples, cfg.sampler, cfg.seed, epoch);
    let mut acc = DomainLossAccumulator::new();
    let mut image_losses = Vec::new();
    let mut batch_means = T::zero();
    let mut n_batches = 0usize;

    for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
        let inv_len = T::one() / T::from_count(batch.len());
        let mut grad = model.zeros_like();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &samples[i];
            let d = s.domain.index;
            let w = weights.get(d).ok_or(PenaliseError::UnknownDomain(d))?;
            let (l, g) = detector::loss_and_backward(model, &s.features, &targets[i], lambda, w * inv_len)?;
            if !l.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, image_id: s.image_id });
            }
            acc.record(d, l.total)?;
            if cfg.record_image_losses {
                image_losses.push(ImageLoss { image_id: s.image_id, domain: d, loss: l.total });
            }
            losses.push((d, l.total));
            grad.add_scaled(&g, T::one());
        }
        let lb = batch_loss(&losses, weights)?;
        batch_means = batch_means + lb.total * inv_len;
        n_batches += 1;
        adam_step(model, &grad, adam, lr, &cfg.adam).map_err(|e| match e {
            TrainError::NonFiniteGradient { tensor, .. } => TrainError::NonFiniteGradient { epoch, step, tensor },
            other => other,
        })?;
        observer(TrainEvent::Step { epoch, step, params: model });
    }

    let stats = EpochStats {
        epoch,
        per_domain_avg_loss: penalise::average_domain_losses(&acc),
        weights_used: weights.clone(),
        mean_batch_loss: batch_means / T::from_count(n_batches),
        image_losses,
    };
    Ok(EpochOutcome { accumulator: acc, stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun<T> {
    pub model: ModelParams<T>,
    pub epochs: Vec<EpochStats<T>>,
    /// `epochs + 1` entries: the weights used in each epoch, then the update
    /// computed after the last one.
    pub weight_history: Vec<DomainWeights<T>>,
}

pub fn run_training<T: Scalar>(train: &[Sample<T>], cfg: &TrainConfig) -> Result<TrainingRun<T>, TrainError> {
    run_training_observed(train, cfg, &mut |_| {})
}

pub fn run_training_observed<T: Scalar>(
    train: &[Sample<T>],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_, T>),
) -> Result<TrainingRun<T>, TrainError> {
    cfg.validate()?;
    let first = train.first().ok_or(TrainError::EmptyTrainingSet)?;
    let (grid, dim) = (first.features.grid(), first.features.dim());
    if train.iter().any(|s| s.features.grid() != grid || s.features.dim() != dim) {
        return Err(TrainError::Config("training samples disagree on feature shape".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
    let mut model = init_params::<T, _>(dim, cfg.hidden_units, &mut init_rng)?;
    let mut adam = AdamState::new(&model);
    let targets = targets_for(train);
    let domains: Vec<usize> = train.iter().map(|s| s.domain.index).collect();
    let mut weights = DomainWeights::unity(domains, cfg.strategy.scale_mode)?;
    let mut history = vec![weights.clone()];
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let out = train_epoch(&mut model, &mut adam, train, &targets, &weights, cfg, epoch, observer)?;
        let next = epoch_update(&cfg.strategy, &weights, &out.accumulator)?;
        observer(TrainEvent::EpochEnd { stats: &out.stats, params: &model, next_weights: &next });
        epochs.push(out.stats);
        history.push(next.clone());
        weights = next;
    }
    Ok(TrainingRun { model, epochs, weight_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_benchmark, BenchmarkConfig};

    fn smoke() -> Vec<Sample<f64>> {
        build_benchmark::<f64>(&BenchmarkConfig::smoke_preset()).unwrap().official_train
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { learning_rate: 0.01, epochs: 3, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 0.0001);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.epochs, 12);
        assert_eq!(c.lambda_reg, 1.0);
        assert_eq!(c.adam, AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p: ModelParams<f64> = init_params(3, 2, &mut rng).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut p = ModelParams::<f64>::zeros(3, 0);
        let mut g = p.zeros_like();
        let vals: Vec<f64> =
            (0..g.num_params()).map(|i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.02 * (i as f64 + 1.0) }).collect();
        g.set_flat(&vals);
        let mut st = AdamState::new(&p);
        let lr = 1e-3;
        let eps = AdamConfig::default().eps;
        adam_step(&mut p, &g, &mut st, lr, &AdamConfig::default()).unwrap();
        for (new, grad) in p.to_flat().iter().zip(&vals) {
            let expected = -lr * grad.signum();
            let slack = lr * eps / grad.abs() + 1e-18;
            assert!((new - expected).abs() <= slack, "{new} vs {expected}");
        }
        assert!(st.v.to_flat().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ModelParams::<f64>::zeros(2, 0);
        let mut g = p.zeros_like();
        g.obj_bias = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref tensor, .. } if tensor == "obj.bias"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p: ModelParams<f64> = init_params(3, 0, &mut rng).unwrap();
            let g: ModelParams<f64> = init_params(3, 0, &mut rng).unwrap();
            let mut st = AdamState::new(&p);
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_single_image_keeps_params() {
        let data = smoke();
        let one = &data[..1];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, STREAM_INIT, 0));
        let mut model: ModelParams<f64> = init_params(4, 0, &mut rng).unwrap();
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        let cfg = TrainConfig { learning_rate: 0.0, ..quick_cfg() };
        let w = DomainWeights::unity([one[0].domain.index], cfg.strategy.scale_mode).unwrap();
        train_epoch(&mut model, &mut adam, one, &targets_for(one), &w, &cfg, 0, &mut |_| {}).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn accumulator_counts_match_split() {
        let data = smoke();
        let cfg = quick_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model: ModelParams<f64> = init_params(4, 0, &mut rng).unwrap();
        let mut adam = AdamState::new(&model);
        let w = DomainWeights::unity(data.iter().map(|s| s.domain.index), cfg.strategy.scale_mode).unwrap();
        let out = train_epoch(&mut model, &mut adam, &data, &targets_for(&data), &w, &cfg, 0, &mut |_| {}).unwrap();
        for d in [0, 1] {
            let n = data.iter().filter(|s| s.domain.index == d).count();
            assert_eq!(out.accumulator.count_of(d), n);
        }
        assert_eq!(adam.t as usize, data.len().div_ceil(cfg.batch_size));
    }

    #[test]
    fn samplers_visit_every_image_once() {
        let data = smoke();
        for sampler in [Sampler::Uniform, Sampler::DomainBalanced] {
            let mut order = epoch_order(&data, sampler, 3, 1);
            order.sort_unstable();
            assert_eq!(order, (0..data.len()).collect::<Vec<_>>());
        }
        let bal = epoch_order(&data, Sampler::DomainBalanced, 3, 1);
        assert_ne!(data[bal[0]].domain.index, data[bal[1]].domain.index);
    }

    #[test]
    fn single_epoch_never_uses_updated_weights() {
        let cfg = TrainConfig { epochs: 1, ..quick_cfg() };
        let run = run_training(&smoke(), &cfg).unwrap();
        assert_eq!(run.epochs.len(), 1);
        assert!(run.epochs[0].weights_used.weights.values().all(|&w| w == 1.0));
        assert_eq!(run.weight_history.len(), 2);
    }

    #[test]
    fn runs_are_reproducible() {
        let data = smoke();
        assert_eq!(run_training(&data, &quick_cfg()).unwrap(), run_training(&data, &quick_cfg()).unwrap());
    }

    #[test]
    fn erm_equals_frozen_dp() {
        let data = smoke();
        let erm = TrainConfig { strategy: WeightingStrategy::erm(), ..quick_cfg() };
        let dp = TrainConfig { strategy: WeightingStrategy::dp().frozen(), ..quick_cfg() };
        let a = run_training(&data, &erm).unwrap();
        let b = run_training(&data, &dp).unwrap();
        assert_eq!(
            a.model.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.model.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn invalid_config() {
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let c = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert!(matches!(run_training::<f64>(&[], &TrainConfig::default()), Err(TrainError::EmptyTrainingSet)));
        let c: Result<TrainConfig, _> = serde_json::from_str(r#"{"learning_rate":0.1,"bogus":1}"#);
        assert!(c.is_err());
    }
}
