//! Binarization, confusion counts, and the segmentation metrics (DSC, mIoU,
//! precision, recall) with their CSV report.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hard threshold: 1 where `pred > threshold`, else 0.
pub fn binarize<T: Element>(pred: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::from_f64(threshold);
    pred.map(|v| if v > t { T::one() } else { T::zero() })
}

/// Pixel tallies at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Tallies a binary prediction against a binary target.
pub fn confusion_counts<T: Element>(pred_bin: &Tensor<T>, target: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred_bin.shape() != target.shape() {
        return Err(Error::shape(format!(
            "confusion_counts: shapes {} and {} differ",
            pred_bin.shape(),
            target.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred_bin.iter().zip(target.iter()) {
        let pb = if p == T::one() {
            true
        } else if p == T::zero() {
            false
        } else {
            return Err(Error::shape("confusion_counts: prediction is not binary"));
        };
        let yb = if y == T::one() {
            true
        } else if y == T::zero() {
            false
        } else {
            return Err(Error::shape("confusion_counts: target is not binary"));
        };
        match (pb, yb) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Empty-denominator convention: a metric whose denominator is zero scores 1
/// (correctly predicting "nothing to segment" is a perfect outcome).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice coefficient `2tp / (2tp + fp + fn)`.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// Foreground intersection-over-union `tp / (tp + fp + fn)`.
pub fn iou_foreground(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// Two-class mean of foreground and background IoU.
pub fn miou(c: &ConfusionCounts) -> f64 {
    let bg = ratio(c.tn, c.tn + c.fp + c.fn_);
    0.5 * (iou_foreground(c) + bg)
}

/// `(precision, recall)`.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Per-image metric row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub id: String,
    pub dsc: f64,
    pub miou: f64,
    pub iou_fg: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricsRow {
    pub fn from_counts(id: impl Into<String>, c: &ConfusionCounts) -> MetricsRow {
        let (precision, recall) = precision_recall(c);
        MetricsRow {
            id: id.into(),
            dsc: dsc(c),
            miou: miou(c),
            iou_fg: iou_foreground(c),
            precision,
            recall,
        }
    }
}

/// Per-image rows plus their arithmetic means.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub threshold: f64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new(threshold: f64) -> MetricsReport {
        MetricsReport {
            threshold,
            rows: Vec::new(),
        }
    }

    pub fn push<T: Element>(
        &mut self,
        id: &str,
        pred: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<&MetricsRow> {
        let bin = binarize(pred, self.threshold);
        let c = confusion_counts(&bin, target)?;
        self.rows.push(MetricsRow::from_counts(id, &c));
        Ok(self.rows.last().unwrap())
    }

    fn mean(&self, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_dsc(&self) -> f64 {
        self.mean(|r| r.dsc)
    }

    pub fn mean_miou(&self) -> f64 {
        self.mean(|r| r.miou)
    }

    /// One row per image plus a trailing `mean` row. The foreground IoU is
    /// appended as an extra column after the headline metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,miou,precision,recall,iou_fg\n");
        let fmt = |r: &MetricsRow| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.id, r.dsc, r.miou, r.precision, r.recall, r.iou_fg
            )
        };
        for row in &self.rows {
            out.push_str(&fmt(row));
        }
        let mean_row = MetricsRow {
            id: "mean".into(),
            dsc: self.mean_dsc(),
            miou: self.mean_miou(),
            iou_fg: self.mean(|r| r.iou_fg),
            precision: self.mean(|r| r.precision),
            recall: self.mean(|r| r.recall),
        };
        out.push_str(&fmt(&mean_row));
        out
    }
}
