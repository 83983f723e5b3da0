//! Pixel-wise evaluation: confusion matrices, per-class and macro metrics,
//! log-scaled confusion views, and confidence maps.
//!
//! Zero denominators resolve to 0 rather than NaN so reports stay
//! machine-readable; classes absent from both prediction and truth are
//! excluded from macro averages.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};

/// Square pixel-count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Add one prediction/truth mask pair.
    pub fn accumulate(&mut self, pred: &ArrayView2<u8>, truth: &ArrayView2<u8>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            if (p as usize) >= c || (t as usize) >= c {
                return Err(Error::Eval(format!(
                    "class out of range: pred {p}, truth {t}, {c} classes"
                )));
            }
            self.counts[(t as usize, p as usize)] += 1;
        }
        Ok(())
    }

    /// Elementwise sum with another matrix.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[(class, class)]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        self.counts.column(class).sum() - self.counts[(class, class)]
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.counts.row(class).sum() - self.counts[(class, class)]
    }

    /// A class participates in metrics if it appears in truth or prediction.
    pub fn class_present(&self, class: usize) -> bool {
        self.true_positives(class) + self.false_positives(class) + self.false_negatives(class) > 0
    }

    /// Fraction of pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes()).map(|c| self.counts[(c, c)]).sum();
        correct as f64 / total as f64
    }
}

/// TP / (TP + FP); 0 when the class is never predicted.
pub fn precision(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.true_positives(class);
    let denom = tp + cm.false_positives(class);
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

/// TP / (TP + FN); 0 when the class is absent from the ground truth.
pub fn recall(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.true_positives(class);
    let denom = tp + cm.false_negatives(class);
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Harmonic mean 2PR / (P + R); 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class intersection over union, TP / (TP + FP + FN).
pub fn iou(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.true_positives(class);
    let denom = tp + cm.false_positives(class) + cm.false_negatives(class);
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Macro-mean IoU over the classes present in prediction or truth, plus the
/// per-class values (absent classes reported as 0 but excluded from the
/// mean). Background participates only when `include_background` is set.
pub fn miou(cm: &ConfusionMatrix, include_background: bool) -> Result<(f64, Vec<f64>)> {
    let start = if include_background { 0 } else { 1 };
    let per_class: Vec<f64> = (0..cm.num_classes()).map(|c| iou(cm, c)).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for class in start..cm.num_classes() {
        if cm.class_present(class) {
            sum += per_class[class];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval(
            "mIoU undefined: no class present in prediction or truth".into(),
        ));
    }
    Ok((sum / n as f64, per_class))
}

/// Natural-log view of the counts: `ln(count)` for positive counts, 0 for 0.
pub fn log_view(cm: &ConfusionMatrix) -> Array2<f64> {
    cm.counts.mapv(|v| if v >= 1 { (v as f64).ln() } else { 0.0 })
}

/// Per-pixel max softmax probability of one image's `(C', H, W)` logits.
pub fn confidence_map(logits: &ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[(ci, y, x)]);
            }
            let mut sum = 0.0;
            let mut best = 0.0f64;
            for ci in 0..c {
                let e = (logits[(ci, y, x)] - max).exp();
                sum += e;
                best = best.max(e);
            }
            out[(y, x)] = best / sum;
        }
    }
    out
}

/// Argmax over the class axis of `(C', H, W)` logits, lowest index winning
/// ties (the same rule pseudo-labeling uses).
pub fn predict_mask(logits: &ArrayView3<f64>) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            for ci in 1..c {
                if logits[(ci, y, x)] > logits[(best, y, x)] {
                    best = ci;
                }
            }
            out[(y, x)] = best as u8;
        }
    }
    out
}

/// Batch variant of [`predict_mask`] over `(B, C', H, W)` logits.
pub fn predict_masks(logits: &ndarray::ArrayView4<f64>) -> Array3<u8> {
    let (b, _, h, w) = logits.dim();
    let mut out = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&predict_mask(&logits.index_axis(ndarray::Axis(0), bi)));
    }
    out
}

/// One class's confusion-derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_index: usize,
    pub class_name: String,
    pub present: bool,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-defect-class metrics plus unweighted macro averages over the defect
/// classes present in the split (background excluded, matching 4-class
/// defect tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_iou: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub pixel_accuracy: f64,
    /// Classes skipped by the macro average because they never occurred.
    pub absent_classes: Vec<String>,
}

/// Summarize a confusion matrix against a class catalog.
pub fn report(cm: &ConfusionMatrix, catalog: &ClassCatalog) -> Result<MetricsReport> {
    if cm.num_classes() != catalog.num_classes() {
        return Err(Error::Shape(format!(
            "confusion matrix has {} classes, catalog {}",
            cm.num_classes(),
            catalog.num_classes()
        )));
    }
    let mut per_class = Vec::new();
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut n_present = 0usize;
    let mut absent = Vec::new();
    for class in catalog.defect_indices() {
        let p = precision(cm, class);
        let r = recall(cm, class);
        let metrics = ClassMetrics {
            class_index: class,
            class_name: catalog.name(class).unwrap_or("?").to_string(),
            present: cm.class_present(class),
            tp: cm.true_positives(class),
            fp: cm.false_positives(class),
            fn_: cm.false_negatives(class),
            iou: iou(cm, class),
            precision: p,
            recall: r,
            f1: f1(p, r),
        };
        if metrics.present {
            sums.0 += metrics.iou;
            sums.1 += metrics.precision;
            sums.2 += metrics.recall;
            sums.3 += metrics.f1;
            n_present += 1;
        } else {
            absent.push(metrics.class_name.clone());
        }
        per_class.push(metrics);
    }
    let denom = n_present.max(1) as f64;
    Ok(MetricsReport {
        per_class,
        macro_iou: sums.0 / denom,
        macro_precision: sums.1 / denom,
        macro_recall: sums.2 / denom,
        macro_f1: sums.3 / denom,
        pixel_accuracy: cm.pixel_accuracy(),
        absent_classes: absent,
    })
}
