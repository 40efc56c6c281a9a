//! Binary-segmentation evaluation: IoU, recall, precision, F1.
//!
//! The positive class is road (label 1). Dataset-level numbers are
//! micro-averaged: confusions are summed first, metrics computed once.
//! Degenerate denominators yield `None` rather than an error, and `None`
//! entries are excluded from aggregates (mIoU averages the class IoUs
//! that are defined).

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

/// Decision threshold applied to probabilities at evaluation time.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Pixel counts of a binary confusion matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Associative merge for micro-averaging.
    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Metric values in [0,1]; `None` marks an undefined (0/0) entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub road_iou: Option<f64>,
    pub bg_iou: Option<f64>,
    pub miou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

/// Threshold probabilities into a road mask: 1 iff `p >= threshold`.
/// The `>=` is inclusive, matching pseudo-label generation.
pub fn binarize(p: &Tensor, threshold: f64) -> Result<BinaryMask> {
    let shape = p.shape();
    let (h, w) = match shape {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::InvalidInput(format!(
                "binarize expects [1,h,w] or [h,w], got {other:?}"
            )))
        }
    };
    let data: Vec<u8> = p
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1 } else { 0 })
        .collect();
    BinaryMask::new(h, w, data)
}

/// Count the confusion matrix of a prediction against ground truth.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!("BinaryMask guarantees {{0,1}}"),
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Compute all metrics from a confusion matrix.
pub fn report(c: &Confusion) -> MetricReport {
    let road_iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let bg_iou = ratio(c.tn, c.tn + c.fp + c.fn_);
    let miou = match (road_iou, bg_iou) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    MetricReport {
        road_iou,
        bg_iou,
        miou,
        recall,
        precision,
        f1,
    }
}

/// Micro-averaged report over many (prediction, truth) pairs.
pub fn report_micro<'a, I>(pairs: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>,
{
    let mut total = Confusion::default();
    for (pred, gt) in pairs {
        total = total.merge(&confusion(pred, gt)?);
    }
    Ok(report(&total))
}
