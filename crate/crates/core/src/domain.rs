//! Vocabulary types shared by the generator, detector and metrics: domain ids,
//! boxes, samples and detections.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Scalar;

/// Identifies one data source of a benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainId {
    pub index: usize,
    pub label: String,
}

impl DomainId {
    pub fn new(index: usize, label: impl Into<String>) -> Result<Self, DomainError> {
        let label = label.into();
        if label.is_empty() {
            return Err(DomainError::EmptyLabel(index));
        }
        Ok(DomainId { index, label })
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.label, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("domain {0} has an empty label")]
    EmptyLabel(usize),
    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("non-finite box coordinate")]
    NonFiniteBox,
}

/// Axis-aligned box in corner form, grid units.
///
/// Fields are private so that every box built through [`BBox::new`] satisfies
/// `xmin < xmax`, `ymin < ymax` and finiteness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    xmin: T,
    ymin: T,
    xmax: T,
    ymax: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(xmin: T, ymin: T, xmax: T, ymax: T) -> Result<Self, DomainError> {
        let b = BBox { xmin, ymin, xmax, ymax };
        b.check()?;
        Ok(b)
    }

    /// Builds a box without checking its invariants. Intended for raw inputs that
    /// are validated afterwards (see [`validate_sample`]).
    pub fn new_unchecked(xmin: T, ymin: T, xmax: T, ymax: T) -> Self {
        BBox { xmin, ymin, xmax, ymax }
    }

    /// Centre/size constructor.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self, DomainError> {
        let half = T::lit(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        let c = self.corners();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteBox);
        }
        if !(self.xmin < self.xmax && self.ymin < self.ymax) {
            return Err(DomainError::DegenerateBox(c[0].as_f64(), c[1].as_f64(), c[2].as_f64(), c[3].as_f64()));
        }
        Ok(())
    }

    pub fn xmin(&self) -> T {
        self.xmin
    }
    pub fn ymin(&self) -> T {
        self.ymin
    }
    pub fn xmax(&self) -> T {
        self.xmax
    }
    pub fn ymax(&self) -> T {
        self.ymax
    }

    pub fn corners(&self) -> [T; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> T {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> T {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (half * (self.xmin + self.xmax), half * (self.ymin + self.ymax))
    }

    pub fn area(&self) -> T {
        box_area(self)
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        BBox { xmin: self.xmin + dx, ymin: self.ymin + dy, xmax: self.xmax + dx, ymax: self.ymax + dy }
    }

    /// Lexicographic comparison on `(xmin, ymin, xmax, ymax)`; used for tie-breaks.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        for (a, b) in self.corners().iter().zip(other.corners().iter()) {
            match a.partial_cmp(b) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        std::cmp::Ordering::Equal
    }

    /// True when the box lies within `[0, g] x [0, g]`.
    pub fn within_grid(&self, g: usize) -> bool {
        let g = T::from_count(g);
        self.xmin >= T::zero() && self.ymin >= T::zero() && self.xmax <= g && self.ymax <= g
    }
}

/// `(xmax - xmin) * (ymax - ymin)`.
pub fn box_area<T: Scalar>(b: &BBox<T>) -> T {
    (b.xmax - b.xmin) * (b.ymax - b.ymin)
}

// Boxes serialize as `[xmin, ymin, xmax, ymax]`; deserialization does not
// validate so that schema-level errors can name the offending record.
impl<T: Scalar> Serialize for BBox<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.corners().serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for BBox<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v: Vec<T> = Vec::deserialize(d)?;
        if v.len() != 4 {
            return Err(D::Error::invalid_length(v.len(), &"4 box corners"));
        }
        Ok(BBox::new_unchecked(v[0], v[1], v[2], v[3]))
    }
}

/// A `G x G x F` feature tensor stored row-major: `((row * G) + col) * F + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid<T> {
    grid: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn zeros(grid: usize, dim: usize) -> Self {
        FeatureGrid { grid, dim, data: vec![T::zero(); grid * grid * dim] }
    }

    pub fn from_vec(grid: usize, dim: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == grid * grid * dim).then_some(FeatureGrid { grid, dim, data })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn cell(&self, cell: usize) -> &[T] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [T] {
        &mut self.data[cell * self.dim..(cell + 1) * self.dim]
    }
}

/// One synthetic image: a feature grid plus its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub domain: DomainId,
    pub image_id: u64,
    pub features: FeatureGrid<T>,
    pub gt_boxes: Vec<BBox<T>>,
}

/// A scored box emitted by a detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub score: T,
}

impl<T: Scalar> Detection<T> {
    /// Score-descending order, ties broken by lexicographic box corners.
    pub fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
    }
}

/// First invariant a sample breaks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleViolation {
    #[error("feature shape {got_grid}x{got_grid}x{got_dim} does not match {grid}x{grid}x{dim}")]
    Shape { grid: usize, dim: usize, got_grid: usize, got_dim: usize },
    #[error("non-finite feature at offset {0}")]
    NonFiniteFeature(usize),
    #[error("degenerate box (gt_boxes[{0}])")]
    DegenerateBox(usize),
    #[error("non-finite box (gt_boxes[{0}])")]
    NonFiniteBox(usize),
    #[error("box outside grid (gt_boxes[{0}])")]
    OutsideGrid(usize),
    #[error("empty domain label")]
    EmptyLabel,
}

/// Checks every [`Sample`] invariant against a `grid x grid x dim` shape.
pub fn validate_sample<T: Scalar>(s: &Sample<T>, grid: usize, dim: usize) -> Result<(), SampleViolation> {
    if s.domain.label.is_empty() {
        return Err(SampleViolation::EmptyLabel);
    }
    let f = &s.features;
    if f.grid != grid || f.dim != dim || f.data.len() != grid * grid * dim {
        return Err(SampleViolation::Shape { grid, dim, got_grid: f.grid, got_dim: f.dim });
    }
    if let Some(pos) = f.data.iter().position(|v| !v.is_finite()) {
        return Err(SampleViolation::NonFiniteFeature(pos));
    }
    for (i, b) in s.gt_boxes.iter().enumerate() {
        match b.check() {
            Err(DomainError::NonFiniteBox) => return Err(SampleViolation::NonFiniteBox(i)),
            Err(_) => return Err(SampleViolation::DegenerateBox(i)),
            Ok(()) => {}
        }
        if !b.within_grid(grid) {
            return Err(SampleViolation::OutsideGrid(i));
        }
    }
    Ok(())
}
