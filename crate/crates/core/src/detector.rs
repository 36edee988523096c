//! Single-anchor grid detector with an analytic backward pass.
//!
//! Every cell of a `G x G` grid is a unit anchor. An optional `tanh` hidden
//! layer maps the cell's `F` features to `H` activations; two linear heads then
//! produce an objectness logit and four box deltas `(dx, dy, dw, dh)`:
//! `dx, dy` are centre offsets from the cell centre and `dw, dh` are log side
//! lengths.
//!
//! The per-image loss is `cls + lambda_reg * reg`, where `cls` is binary
//! cross-entropy with logits averaged over all cells and `reg` is the smooth-L1
//! distance (summed over the four deltas) averaged over positive cells.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BBox, Detection, FeatureGrid};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("feature_dim must be >= 1")]
    ZeroFeatureDim,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T> {
    /// `F x H`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Detector parameters. With `hidden_dim = 0` the heads read raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub hidden: Option<HiddenLayer<T>>,
    /// Length `D` (`D = H` with a hidden layer, else `F`).
    pub obj_weights: Vec<T>,
    pub obj_bias: T,
    /// `D x 4`, row-major.
    pub box_weights: Vec<T>,
    pub box_bias: [T; 4],
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(feature_dim: usize, hidden_dim: usize) -> Self {
        let d = if hidden_dim > 0 { hidden_dim } else { feature_dim };
        ModelParams {
            feature_dim,
            hidden_dim,
            hidden: (hidden_dim > 0).then(|| HiddenLayer {
                weights: vec![T::zero(); feature_dim * hidden_dim],
                bias: vec![T::zero(); hidden_dim],
            }),
            obj_weights: vec![T::zero(); d],
            obj_bias: T::zero(),
            box_weights: vec![T::zero(); d * 4],
            box_bias: [T::zero(); 4],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.hidden_dim)
    }

    /// Width of the representation the heads read.
    pub fn head_dim(&self) -> usize {
        if self.hidden_dim > 0 {
            self.hidden_dim
        } else {
            self.feature_dim
        }
    }

    /// `(name, shape, values)` for every tensor, in a fixed order.
    pub fn named_slices(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        let d = self.head_dim();
        let mut out = Vec::with_capacity(6);
        if let Some(h) = &self.hidden {
            out.push(("hidden.weight", vec![self.feature_dim, self.hidden_dim], h.weights.as_slice()));
            out.push(("hidden.bias", vec![self.hidden_dim], h.bias.as_slice()));
        }
        out.push(("obj.weight", vec![d], self.obj_weights.as_slice()));
        out.push(("obj.bias", vec![1], std::slice::from_ref(&self.obj_bias)));
        out.push(("box.weight", vec![d, 4], self.box_weights.as_slice()));
        out.push(("box.bias", vec![4], self.box_bias.as_slice()));
        out
    }

    /// Mutable views in the order of [`named_slices`](Self::named_slices).
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(6);
        if let Some(h) = &mut self.hidden {
            out.push(h.weights.as_mut_slice());
            out.push(h.bias.as_mut_slice());
        }
        out.push(self.obj_weights.as_mut_slice());
        out.push(std::slice::from_mut(&mut self.obj_bias));
        out.push(self.box_weights.as_mut_slice());
        out.push(self.box_bias.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_slices().iter().map(|s| s.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.named_slices().into_iter().flat_map(|s| s.2.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length");
        let mut it = values.iter();
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
    }

    /// `self += scale * other`, element by element in tensor order.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let src: Vec<T> = other.to_flat();
        let mut it = src.into_iter();
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *v + scale * it.next().expect("same shape");
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_slices().iter().all(|s| s.2.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim && self.hidden_dim == other.hidden_dim
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            params: self
                .named_slices()
                .into_iter()
                .map(|(name, shape, values)| (name.to_string(), TensorRecord { shape, values: values.to_vec() }))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint<T>) -> Result<Self, DetectorError> {
        if c.feature_dim == 0 {
            return Err(DetectorError::ZeroFeatureDim);
        }
        let mut p = Self::zeros(c.feature_dim, c.hidden_dim);
        let expected: Vec<(String, Vec<usize>)> =
            p.named_slices().into_iter().map(|(n, s, _)| (n.to_string(), s)).collect();
        if c.params.len() != expected.len() {
            return Err(DetectorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                c.params.len()
            )));
        }
        for ((name, shape), slot) in expected.iter().zip(p.slices_mut()) {
            let t = c.params.get(name).ok_or_else(|| DetectorError::Checkpoint(format!("missing tensor {name}")))?;
            if &t.shape != shape || t.values.len() != slot.len() {
                return Err(DetectorError::Checkpoint(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    t.shape
                )));
            }
            slot.copy_from_slice(&t.values);
        }
        if !p.all_finite() {
            return Err(DetectorError::Checkpoint("non-finite parameter".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// JSON checkpoint: tensor name to shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub params: BTreeMap<String, TensorRecord<T>>,
}

/// Zero biases; weights `N(0, 1) / sqrt(fan_in)`.
pub fn init_params<T: Scalar, R: Rng>(
    feature_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> Result<ModelParams<T>, DetectorError> {
    if feature_dim == 0 {
        return Err(DetectorError::ZeroFeatureDim);
    }
    let mut p = ModelParams::zeros(feature_dim, hidden_dim);
    let mut draw = |fan_in: usize, out: &mut [T]| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in out {
            *v = T::lit(scale * rng.sample::<f64, _>(StandardNormal));
        }
    };
    if let Some(h) = &mut p.hidden {
        draw(feature_dim, &mut h.weights);
    }
    let d = p.head_dim();
    draw(d, &mut p.obj_weights);
    draw(d, &mut p.box_weights);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction<T> {
    pub objectness_logit: T,
    pub deltas: [T; 4],
}

/// Row-major `G x G` predictions; cell index `row * G + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid<T> {
    pub grid: usize,
    pub cells: Vec<CellPrediction<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget<T> {
    pub positive: bool,
    /// Meaningful only for positive cells.
    pub deltas: [T; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid<T> {
    pub grid: usize,
    pub cells: Vec<CellTarget<T>>,
}

impl<T: Scalar> TargetGrid<T> {
    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.positive).count()
    }
}

/// One image's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerImageLoss<T> {
    pub total: T,
    pub cls_component: T,
    pub reg_component: T,
    pub n_positive: usize,
}

struct CellForward<T> {
    hidden: Vec<T>,
    logit: T,
    deltas: [T; 4],
}

fn check_features<T: Scalar>(p: &ModelParams<T>, features: &FeatureGrid<T>) -> Result<(), DetectorError> {
    if features.dim() != p.feature_dim {
        return Err(DetectorError::Shape(format!(
            "features have dim {}, model expects {}",
            features.dim(),
            p.feature_dim
        )));
    }
    Ok(())
}

fn forward_cell<T: Scalar>(p: &ModelParams<T>, x: &[T]) -> CellForward<T> {
    let hidden: Vec<T> = match &p.hidden {
        Some(h) => (0..p.hidden_dim)
            .map(|j| {
                let pre = (0..p.feature_dim).fold(h.bias[j], |acc, k| acc + x[k] * h.weights[k * p.hidden_dim + j]);
                pre.tanh()
            })
            .collect(),
        None => Vec::new(),
    };
    let rep: &[T] = if p.hidden.is_some() { &hidden } else { x };
    let logit = rep.iter().zip(&p.obj_weights).fold(p.obj_bias, |acc, (a, w)| acc + *a * *w);
    let mut deltas = p.box_bias;
    for (k, a) in rep.iter().enumerate() {
        for (c, d) in deltas.iter_mut().enumerate() {
            *d = *d + *a * p.box_weights[k * 4 + c];
        }
    }
    CellForward { hidden, logit, deltas }
}

pub fn forward<T: Scalar>(p: &ModelParams<T>, features: &FeatureGrid<T>) -> Result<PredictionGrid<T>, DetectorError> {
    check_features(p, features)?;
    let cells = (0..features.cells())
        .map(|c| {
            let f = forward_cell(p, features.cell(c));
            CellPrediction { objectness_logit: f.logit, deltas: f.deltas }
        })
        .collect();
    Ok(PredictionGrid { grid: features.grid(), cells })
}

/// Encodes a box against the unit anchor of cell `(row, col)`.
pub fn encode_box<T: Scalar>(b: &BBox<T>, row: usize, col: usize) -> [T; 4] {
    let half = T::lit(0.5);
    let (cx, cy) = b.center();
    [cx - (T::from_count(col) + half), cy - (T::from_count(row) + half), b.width().ln(), b.height().ln()]
}

/// Inverse of [`encode_box`]; `None` when the deltas do not give a finite, non-degenerate box.
pub fn decode_box<T: Scalar>(deltas: &[T; 4], row: usize, col: usize) -> Option<BBox<T>> {
    let half = T::lit(0.5);
    let cx = T::from_count(col) + half + deltas[0];
    let cy = T::from_count(row) + half + deltas[1];
    BBox::from_center(cx, cy, deltas[2].exp(), deltas[3].exp()).ok()
}

/// Cell index `(row, col)` of the cell containing the box centre, clamped to the grid.
pub fn center_cell<T: Scalar>(b: &BBox<T>, grid: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    let clamp = |v: T| v.floor().to_usize().unwrap_or(0).min(grid - 1);
    (clamp(cy.max(T::zero())), clamp(cx.max(T::zero())))
}

/// Marks the centre cell of every box positive. When boxes share a cell the
/// larger area wins, then the lexicographically smaller corner tuple.
pub fn assign_targets<T: Scalar>(gt_boxes: &[BBox<T>], grid: usize) -> TargetGrid<T> {
    let mut owner: Vec<Option<&BBox<T>>> = vec![None; grid * grid];
    for b in gt_boxes {
        let (row, col) = center_cell(b, grid);
        let slot = &mut owner[row * grid + col];
        let replace = match slot {
            None => true,
            Some(cur) => match b.area().partial_cmp(&cur.area()) {
                Some(std::cmp::Ordering::Greater) => true,
                Some(std::cmp::Ordering::Equal) => b.lex_cmp(cur) == std::cmp::Ordering::Less,
                _ => false,
            },
        };
        if replace {
            *slot = Some(b);
        }
    }
    let cells = owner
        .iter()
        .enumerate()
        .map(|(cell, o)| match o {
            Some(b) => CellTarget { positive: true, deltas: encode_box(b, cell / grid, cell % grid) },
            None => CellTarget { positive: false, deltas: [T::zero(); 4] },
        })
        .collect();
    TargetGrid { grid, cells }
}

fn bce_with_logits<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

fn smooth_l1<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}

fn smooth_l1_grad<T: Scalar>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

pub fn loss<T: Scalar>(
    preds: &PredictionGrid<T>,
    targets: &TargetGrid<T>,
    lambda_reg: T,
) -> Result<PerImageLoss<T>, DetectorError> {
    if preds.cells.len() != targets.cells.len() {
        return Err(DetectorError::Shape(format!(
            "{} prediction cells vs {} target cells",
            preds.cells.len(),
            targets.cells.len()
        )));
    }
    let n = T::from_count(preds.cells.len());
    let mut cls = T::zero();
    let mut reg = T::zero();
    let mut npos = 0usize;
    for (p, t) in preds.cells.iter().zip(&targets.cells) {
        let y = if t.positive { T::one() } else { T::zero() };
        cls = cls + bce_with_logits(p.objectness_logit, y);
        if t.positive {
            npos += 1;
            for c in 0..4 {
                reg = reg + smooth_l1(p.deltas[c] - t.deltas[c]);
            }
        }
    }
    let cls = cls / n;
    let reg = if npos > 0 { reg / T::from_count(npos) } else { T::zero() };
    Ok(PerImageLoss { total: cls + lambda_reg * reg, cls_component: cls, reg_component: reg, n_positive: npos })
}

/// Loss and the exact gradient of `weight * total` in one pass.
#[allow(clippy::needless_range_loop)]
pub fn loss_and_backward<T: Scalar>(
    p: &ModelParams<T>,
    features: &FeatureGrid<T>,
    targets: &TargetGrid<T>,
    lambda_reg: T,
    weight: T,
) -> Result<(PerImageLoss<T>, ModelParams<T>), DetectorError> {
    check_features(p, features)?;
    if targets.cells.len() != features.cells() {
        return Err(DetectorError::Shape("targets do not match feature grid".into()));
    }
    let ncell = T::from_count(features.cells());
    let npos = targets.positives();
    let reg_scale = if npos > 0 { lambda_reg / T::from_count(npos) } else { T::zero() };
    let mut grad = p.zeros_like();
    let mut cls = T::zero();
    let mut reg = T::zero();
    let d = p.head_dim();
    let mut drep = vec![T::zero(); d];

    for (c, t) in targets.cells.iter().enumerate() {
        let x = features.cell(c);
        let f = forward_cell(p, x);
        let y = if t.positive { T::one() } else { T::zero() };
        cls = cls + bce_with_logits(f.logit, y);
        let dz = weight * (sigmoid(f.logit) - y) / ncell;
        let mut dd = [T::zero(); 4];
        if t.positive {
            for k in 0..4 {
                let diff = f.deltas[k] - t.deltas[k];
                reg = reg + smooth_l1(diff);
                dd[k] = weight * reg_scale * smooth_l1_grad(diff);
            }
        }

        let rep: &[T] = if p.hidden.is_some() { &f.hidden } else { x };
        grad.obj_bias = grad.obj_bias + dz;
        for k in 0..4 {
            grad.box_bias[k] = grad.box_bias[k] + dd[k];
        }
        for (j, a) in rep.iter().enumerate() {
            grad.obj_weights[j] = grad.obj_weights[j] + *a * dz;
            let mut back = p.obj_weights[j] * dz;
            for k in 0..4 {
                grad.box_weights[j * 4 + k] = grad.box_weights[j * 4 + k] + *a * dd[k];
                back = back + p.box_weights[j * 4 + k] * dd[k];
            }
            drep[j] = back;
        }
        if let (Some(gh), Some(_)) = (grad.hidden.as_mut(), p.hidden.as_ref()) {
            for j in 0..p.hidden_dim {
                let a = f.hidden[j];
                let dpre = drep[j] * (T::one() - a * a);
                gh.bias[j] = gh.bias[j] + dpre;
                for (k, xk) in x.iter().enumerate() {
                    gh.weights[k * p.hidden_dim + j] = gh.weights[k * p.hidden_dim + j] + *xk * dpre;
                }
            }
        }
    }
    let cls = cls / ncell;
    let reg = if npos > 0 { reg / T::from_count(npos) } else { T::zero() };
    let l = PerImageLoss { total: cls + lambda_reg * reg, cls_component: cls, reg_component: reg, n_positive: npos };
    Ok((l, grad))
}

/// Gradient of `weight * loss` with respect to every parameter.
pub fn backward<T: Scalar>(
    p: &ModelParams<T>,
    features: &FeatureGrid<T>,
    targets: &TargetGrid<T>,
    lambda_reg: T,
    weight: T,
) -> Result<ModelParams<T>, DetectorError> {
    loss_and_backward(p, features, targets, lambda_reg, weight).map(|(_, g)| g)
}

/// Cells scoring at least `confidence_threshold`, best first.
pub fn decode<T: Scalar>(preds: &PredictionGrid<T>, confidence_threshold: T) -> Vec<Detection<T>> {
    let g = preds.grid;
    let mut out: Vec<Detection<T>> = preds
        .cells
        .iter()
        .enumerate()
        .filter_map(|(cell, p)| {
            let score = sigmoid(p.objectness_logit);
            if score < confidence_threshold {
                return None;
            }
            decode_box(&p.deltas, cell / g, cell % g).map(|bbox| Detection { bbox, score })
        })
        .collect();
    out.sort_by(|a, b| a.rank_cmp(b));
    out
}
