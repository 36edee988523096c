//! Detection accuracy in the WiLDS style.
//!
//! Predictions below the confidence threshold are dropped. The rest are
//! matched greedily, best score first, to the unmatched ground-truth box with
//! the highest IoU; a match needs IoU >= the IoU threshold. Counts are pooled
//! per domain, `Acc = TP / (TP + FP + FN)`, and the average domain accuracy
//! (ADA) is the unweighted mean of the per-domain accuracies.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{decode, forward, DetectorError, ModelParams};
use crate::domain::{BBox, Detection, Sample};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no images to evaluate")]
    Empty,
    #[error("no domain reports")]
    NoDomains,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Schema { file: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Sum counts over a domain's images, then take the accuracy.
    #[default]
    Pooled,
    /// Mean of per-image accuracies.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub iou: f64,
    pub confidence: f64,
    pub pooling: Pooling,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { iou: 0.5, confidence: 0.5, pooling: Pooling::Pooled }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: usize,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub n_images: usize,
    /// No ground truth and no predictions: the accuracy is 1 by convention.
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub ada: f64,
    pub n_domains: usize,
    pub per_domain: Vec<DomainReport>,
}

impl SplitReport {
    pub fn domain(&self, index: usize) -> Option<&DomainReport> {
        self.per_domain.iter().find(|d| d.domain == index)
    }
}

pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = a.xmax().min(b.xmax()) - a.xmin().max(b.xmin());
    let ih = a.ymax().min(b.ymax()) - a.ymin().max(b.ymin());
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

/// Greedy score-ordered matching for one image.
pub fn match_detections<T: Scalar>(
    preds: &[Detection<T>],
    gts: &[BBox<T>],
    iou_thresh: T,
    conf_thresh: T,
) -> ConfusionCounts {
    let mut kept: Vec<&Detection<T>> = preds.iter().filter(|d| d.score >= conf_thresh).collect();
    kept.sort_by(|a, b| a.rank_cmp(b));
    let mut matched = vec![false; gts.len()];
    let mut c = ConfusionCounts::default();
    for d in kept {
        let mut best: Option<(usize, T)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                matched[j] = true;
                c.tp += 1;
            }
            None => c.fp += 1,
        }
    }
    c.fn_ = matched.iter().filter(|m| !**m).count();
    c
}

/// `TP / (TP + FP + FN)`, or 1 when all three are zero.
pub fn domain_accuracy(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Unweighted mean of per-domain accuracies.
pub fn average_domain_accuracy(reports: &[DomainReport]) -> Result<f64, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoDomains);
    }
    Ok(reports.iter().map(|r| r.acc).sum::<f64>() / reports.len() as f64)
}

pub fn generalisation_gap(id_acc: f64, ood_acc: f64) -> f64 {
    id_acc - ood_acc
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval<T> {
    pub domain: usize,
    pub gts: Vec<BBox<T>>,
    pub preds: Vec<Detection<T>>,
}

/// Matches every image and aggregates per domain in ascending domain order.
pub fn evaluate_images<T: Scalar>(images: &[ImageEval<T>], th: &Thresholds) -> Result<SplitReport, MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (iou_t, conf_t) = (T::lit(th.iou), T::lit(th.confidence));
    let mut per: BTreeMap<usize, (ConfusionCounts, usize, f64)> = BTreeMap::new();
    for im in images {
        let c = match_detections(&im.preds, &im.gts, iou_t, conf_t);
        let kept = im.preds.iter().filter(|d| d.score >= conf_t).count();
        assert_eq!(c.tp + c.fn_, im.gts.len(), "tp + fn must equal ground-truth count");
        assert_eq!(c.tp + c.fp, kept, "tp + fp must equal kept predictions");
        let e = per.entry(im.domain).or_default();
        e.0 += c;
        e.1 += 1;
        e.2 += domain_accuracy(&c);
    }
    let per_domain: Vec<DomainReport> = per
        .into_iter()
        .map(|(domain, (counts, n_images, acc_sum))| DomainReport {
            domain,
            counts,
            acc: match th.pooling {
                Pooling::Pooled => domain_accuracy(&counts),
                Pooling::PerImage => acc_sum / n_images as f64,
            },
            n_images,
            vacuous: counts.tp + counts.fp + counts.fn_ == 0,
        })
        .collect();
    let ada = average_domain_accuracy(&per_domain)?;
    Ok(SplitReport { ada, n_domains: per_domain.len(), per_domain })
}

/// Runs the detector on every sample and scores the decoded boxes.
pub fn predict<T: Scalar>(
    model: &ModelParams<T>,
    sample: &Sample<T>,
    confidence: T,
) -> Result<Vec<Detection<T>>, MetricsError> {
    Ok(decode(&forward(model, &sample.features)?, confidence))
}

pub fn evaluate_split<T: Scalar>(
    model: &ModelParams<T>,
    samples: &[Sample<T>],
    th: &Thresholds,
) -> Result<SplitReport, MetricsError> {
    let conf = T::lit(th.confidence);
    let images = samples
        .iter()
        .map(|s| Ok(ImageEval { domain: s.domain.index, gts: s.gt_boxes.clone(), preds: predict(model, s, conf)? }))
        .collect::<Result<Vec<_>, MetricsError>>()?;
    evaluate_images(&images, th)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
struct GtRecord<T> {
    image_id: u64,
    domain: usize,
    gt_boxes: Vec<BBox<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
struct PredRecord<T> {
    image_id: u64,
    boxes: Vec<BBox<T>>,
    scores: Vec<T>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.to_path_buf(), source }
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> MetricsError {
    MetricsError::Schema { file: path.to_path_buf(), line, message: message.into() }
}

fn write_jsonl<S: Serialize>(path: &Path, records: impl Iterator<Item = S>) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| io_err(path)(std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_ground_truth<T: Scalar>(samples: &[Sample<T>], path: &Path) -> Result<(), MetricsError> {
    write_jsonl(
        path,
        samples.iter().map(|s| GtRecord { image_id: s.image_id, domain: s.domain.index, gt_boxes: s.gt_boxes.clone() }),
    )
}

/// One prediction record per image, in the given order.
pub fn write_predictions<T: Scalar>(preds: &[(u64, Vec<Detection<T>>)], path: &Path) -> Result<(), MetricsError> {
    write_jsonl(
        path,
        preds.iter().map(|(id, dets)| PredRecord {
            image_id: *id,
            boxes: dets.iter().map(|d| d.bbox).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
        }),
    )
}

fn parse_lines<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>, MetricsError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| schema(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn check_box<T: Scalar>(path: &Path, line: usize, b: &BBox<T>) -> Result<(), MetricsError> {
    b.check().map_err(|e| schema(path, line, e.to_string()))
}

/// Same semantics as [`evaluate_split`], on a ground-truth file and a
/// prediction file. Images without a prediction record have no predictions.
pub fn score_files<T: Scalar>(gt_path: &Path, pred_path: &Path, th: &Thresholds) -> Result<SplitReport, MetricsError> {
    let gts: Vec<(usize, GtRecord<T>)> = parse_lines(gt_path)?;
    let preds: Vec<(usize, PredRecord<T>)> = parse_lines(pred_path)?;

    let mut by_id: BTreeMap<u64, Vec<Detection<T>>> = BTreeMap::new();
    for (line, p) in preds {
        if p.boxes.len() != p.scores.len() {
            return Err(schema(pred_path, line, format!("{} boxes but {} scores", p.boxes.len(), p.scores.len())));
        }
        let mut dets = Vec::with_capacity(p.boxes.len());
        for (b, s) in p.boxes.into_iter().zip(p.scores) {
            check_box(pred_path, line, &b)?;
            if !(s >= T::zero() && s <= T::one()) {
                return Err(schema(pred_path, line, format!("score {s} outside [0, 1]")));
            }
            dets.push(Detection { bbox: b, score: s });
        }
        if by_id.insert(p.image_id, dets).is_some() {
            return Err(schema(pred_path, line, format!("duplicate image_id {}", p.image_id)));
        }
    }

    let mut seen = BTreeSet::new();
    let mut images = Vec::with_capacity(gts.len());
    for (line, g) in gts {
        if !seen.insert(g.image_id) {
            return Err(schema(gt_path, line, format!("duplicate image_id {}", g.image_id)));
        }
        for b in &g.gt_boxes {
            check_box(gt_path, line, b)?;
        }
        images.push(ImageEval {
            domain: g.domain,
            gts: g.gt_boxes,
            preds: by_id.remove(&g.image_id).unwrap_or_default(),
        });
    }
    if let Some(id) = by_id.keys().next() {
        return Err(schema(pred_path, 0, format!("prediction for unknown image_id {id}")));
    }
    evaluate_images(&images, th)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(c: [f64; 4]) -> BBox<f64> {
        BBox::new(c[0], c[1], c[2], c[3]).unwrap()
    }

    fn det(c: [f64; 4], s: f64) -> Detection<f64> {
        Detection { bbox: bx(c), score: s }
    }

    #[test]
    fn iou_examples() {
        let a = bx([0.0, 0.0, 2.0, 2.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx([3.0, 3.0, 4.0, 4.0])), 0.0);
        assert_eq!(iou(&a, &bx([2.0, 0.0, 3.0, 2.0])), 0.0);
        assert!((iou(&a, &bx([1.0, 1.0, 3.0, 3.0])) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn matching_examples() {
        let gts = [bx([0.0, 0.0, 10.0, 10.0])];
        let preds = [det([0.0, 0.0, 10.0, 10.0], 0.9), det([20.0, 20.0, 30.0, 30.0], 0.8)];
        assert_eq!(match_detections(&preds, &gts, 0.5, 0.5), ConfusionCounts { tp: 1, fp: 1, fn_: 0 });

        let three = [bx([0.0, 0.0, 1.0, 1.0]), bx([2.0, 2.0, 3.0, 3.0]), bx([4.0, 4.0, 5.0, 5.0])];
        assert_eq!(match_detections(&[], &three, 0.5, 0.5), ConfusionCounts { tp: 0, fp: 0, fn_: 3 });
        let perfect: Vec<_> = three.iter().map(|b| Detection { bbox: *b, score: 1.0 }).collect();
        assert_eq!(match_detections(&perfect, &three, 0.5, 0.5), ConfusionCounts { tp: 3, fp: 0, fn_: 0 });
    }

    #[test]
    fn low_confidence_dropped() {
        let gts = [bx([0.0, 0.0, 1.0, 1.0])];
        let preds = [det([0.0, 0.0, 1.0, 1.0], 0.49)];
        assert_eq!(match_detections(&preds, &gts, 0.5, 0.5), ConfusionCounts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn best_iou_then_lowest_index() {
        let gts = [bx([0.0, 0.0, 2.0, 2.0]), bx([0.0, 0.0, 2.0, 2.1]), bx([0.0, 0.0, 2.0, 2.0])];
        let preds = [det([0.0, 0.0, 2.0, 2.0], 0.9), det([0.0, 0.0, 2.0, 2.0], 0.8)];
        // first takes gt 0 (exact, lowest index), second takes gt 2 (exact), gt 1 left over
        assert_eq!(match_detections(&preds, &gts, 0.5, 0.5), ConfusionCounts { tp: 2, fp: 0, fn_: 1 });
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(domain_accuracy(&ConfusionCounts { tp: 3, fp: 1, fn_: 1 }), 0.6);
        assert_eq!(domain_accuracy(&ConfusionCounts { tp: 0, fp: 0, fn_: 5 }), 0.0);
        assert_eq!(domain_accuracy(&ConfusionCounts::default()), 1.0);
    }

    fn report(domain: usize, acc: f64) -> DomainReport {
        DomainReport { domain, counts: ConfusionCounts::default(), acc, n_images: 1, vacuous: false }
    }

    #[test]
    fn ada_examples() {
        assert_eq!(average_domain_accuracy(&[report(0, 0.6), report(1, 0.8)]).unwrap(), 0.7);
        assert_eq!(average_domain_accuracy(&[report(0, 0.35)]).unwrap(), 0.35);
        let a = average_domain_accuracy(&[report(0, 0.1), report(1, 0.7), report(2, 0.4)]).unwrap();
        let b = average_domain_accuracy(&[report(2, 0.4), report(0, 0.1), report(1, 0.7)]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(average_domain_accuracy(&[]), Err(MetricsError::NoDomains)));
    }

    #[test]
    fn ggap_examples() {
        assert_eq!(format!("{:.1}", generalisation_gap(63.3, 49.6)), "13.7");
        assert!((generalisation_gap(63.3, 49.6) - 13.7).abs() < 1e-12);
        assert!((generalisation_gap(66.7, 52.7) - 14.0).abs() < 1e-12);
        assert_eq!(generalisation_gap(0.42, 0.42), 0.0);
    }

    #[test]
    fn per_domain_pooling_and_per_image_mode() {
        let g = bx([0.0, 0.0, 1.0, 1.0]);
        let images = vec![
            ImageEval { domain: 0, gts: vec![g], preds: vec![det([0.0, 0.0, 1.0, 1.0], 0.9)] },
            ImageEval { domain: 0, gts: vec![g, bx([3.0, 3.0, 4.0, 4.0]), bx([5.0, 5.0, 6.0, 6.0])], preds: vec![] },
            ImageEval { domain: 1, gts: vec![], preds: vec![] },
        ];
        let r = evaluate_images(&images, &Thresholds::default()).unwrap();
        assert_eq!(r.n_domains, 2);
        assert_eq!(r.per_domain[0].counts, ConfusionCounts { tp: 1, fp: 0, fn_: 3 });
        assert_eq!(r.per_domain[0].acc, 0.25);
        assert!(r.per_domain[1].vacuous && r.per_domain[1].acc == 1.0);
        assert_eq!(r.ada, 0.625);
        let th = Thresholds { pooling: Pooling::PerImage, ..Thresholds::default() };
        let r = evaluate_images(&images, &th).unwrap();
        assert_eq!(r.per_domain[0].acc, 0.5);
    }

    #[test]
    fn report_json_shape() {
        let r = SplitReport {
            ada: 0.5,
            n_domains: 1,
            per_domain: vec![DomainReport {
                domain: 3,
                counts: ConfusionCounts { tp: 1, fp: 0, fn_: 1 },
                acc: 0.5,
                n_images: 2,
                vacuous: false,
            }],
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["per_domain"][0]["fn"], 1);
        assert_eq!(v["per_domain"][0]["domain"], 3);
        let back: SplitReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    mod props {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox<f64>> {
            (0.0..8.0f64, 0.0..8.0f64, 0.2..3.0f64, 0.2..3.0f64).prop_map(|(x, y, w, h)| bx([x, y, x + w, y + h]))
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b);
                prop_assert_eq!(ab, iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(iou(&a, &a), 1.0);
            }

            #[test]
            fn shuffling_predictions_keeps_counts(
                preds in vec((arb_box(), 0.0..1.0f64), 0..6),
                gts in vec(arb_box(), 0..6),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let preds: Vec<Detection<f64>> = preds.into_iter().map(|(b, s)| Detection { bbox: b, score: s }).collect();
                let mut shuffled = preds.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let a = match_detections(&preds, &gts, 0.5, 0.5);
                prop_assert_eq!(a, match_detections(&shuffled, &gts, 0.5, 0.5));
                let kept = preds.iter().filter(|d| d.score >= 0.5).count();
                prop_assert_eq!(a.tp + a.fn_, gts.len());
                prop_assert_eq!(a.tp + a.fp, kept);
            }
        }
    }
}
