//! Evaluation metrics: per-class and mean IoU/F1/accuracy from a pixel
//! confusion matrix, masked RMSE/MAE for gap imputation, and SSIM.

mod ssim;

pub use ssim::{ssim, ssim_multiband, SsimParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range at position {position} (K = {classes})")]
    LabelOutOfRange { label: u8, position: usize, classes: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// K x K pixel counts; rows are ground truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds pixel-wise counts; ground-truth pixels carrying `ignore_label`
    /// are skipped. Order of accumulation never matters.
    pub fn accumulate(
        &mut self,
        pred: &[u8],
        gt: &[u8],
        ignore_label: u8,
    ) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::Shape(format!(
                "pred has {} pixels, gt has {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_label {
                self.ignored += 1;
                continue;
            }
            if g as usize >= k {
                return Err(MetricsError::LabelOutOfRange { label: g, position: i, classes: k });
            }
            if p as usize >= k {
                return Err(MetricsError::LabelOutOfRange { label: p, position: i, classes: k });
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of a partial matrix computed on another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::Shape(format!(
                "merging {}-class matrix into {}-class",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    fn class_tp_fp_fn(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.count(k, k);
        let mut fp = 0;
        let mut fn_ = 0;
        for j in 0..self.classes {
            if j != k {
                fp += self.count(j, k);
                fn_ += self.count(k, j);
            }
        }
        (tp, fp, fn_)
    }
}

/// Per-class and mean segmentation metrics plus optional imputation
/// metrics, with enough provenance to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_iou: Vec<Option<f64>>,
    pub class_f1: Vec<Option<f64>>,
    pub class_acc: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub mean_acc: f64,
    /// Plain pixel accuracy over all evaluated pixels (reported separately
    /// from the per-class mean).
    pub overall_acc: f64,
    pub evaluated_pixels: u64,
    pub ignored_pixels: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricsReport {
    /// CSV rows in the per-class table style: class, accuracy, IoU, F1.
    pub fn to_class_csv(&self) -> String {
        let mut out = String::from("class,accuracy,iou,f1\n");
        for k in 0..self.class_iou.len() {
            let fmt = |v: Option<f64>| v.map_or(String::from(""), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{k},{},{},{}\n",
                fmt(self.class_acc[k]),
                fmt(self.class_iou[k]),
                fmt(self.class_f1[k])
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            self.mean_acc, self.mean_iou, self.mean_f1
        ));
        out
    }
}

/// Summarizes a confusion matrix: `IoU = TP/(TP+FP+FN)`,
/// `F1 = 2TP/(2TP+FP+FN)`, `Acc = TP/(TP+FN)` per class; means run over
/// classes with nonzero union only.
pub fn summarize(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyInput("confusion matrix holds no pixels".into()));
    }
    let k = cm.classes;
    let mut class_iou = vec![None; k];
    let mut class_f1 = vec![None; k];
    let mut class_acc = vec![None; k];
    let (mut sum_iou, mut sum_f1, mut sum_acc, mut scored) = (0.0, 0.0, 0.0, 0usize);
    let mut diag = 0u64;
    for c in 0..k {
        diag += cm.count(c, c);
        let (tp, fp, fn_) = cm.class_tp_fp_fn(c);
        let union = tp + fp + fn_;
        if union == 0 {
            continue; // class absent from gt and predictions: not scored
        }
        let iou = tp as f64 / union as f64;
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        class_iou[c] = Some(iou);
        class_f1[c] = Some(f1);
        sum_iou += iou;
        sum_f1 += f1;
        scored += 1;
        if tp + fn_ > 0 {
            let acc = tp as f64 / (tp + fn_) as f64;
            class_acc[c] = Some(acc);
            sum_acc += acc;
        }
    }
    // mean recall runs over classes that actually appear in ground truth
    let acc_scored = class_acc.iter().flatten().count();
    Ok(MetricsReport {
        class_iou,
        class_f1,
        class_acc,
        mean_iou: if scored > 0 { sum_iou / scored as f64 } else { 0.0 },
        mean_f1: if scored > 0 { sum_f1 / scored as f64 } else { 0.0 },
        mean_acc: if acc_scored > 0 { sum_acc / acc_scored as f64 } else { 0.0 },
        overall_acc: diag as f64 / total as f64,
        evaluated_pixels: total,
        ignored_pixels: cm.ignored,
        rmse: None,
        mae: None,
        ssim: None,
        config_hash: None,
    })
}

/// RMSE and MAE over the pixels selected by `mask`.
pub fn masked_rmse_mae(
    pred: &[f32],
    target: &[f32],
    mask: &[bool],
) -> Result<(f64, f64), MetricsError> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(MetricsError::Shape(format!(
            "pred {} / target {} / mask {} lengths differ",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut count = 0u64;
    let mut sq = 0.0f64;
    let mut ab = 0.0f64;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let d = f64::from(pred[i]) - f64::from(target[i]);
        sq += d * d;
        ab += d.abs();
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyInput("mask selects no pixels".into()));
    }
    Ok(((sq / count as f64).sqrt(), ab / count as f64))
}
