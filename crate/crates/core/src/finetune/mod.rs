//! Downstream adaptation of the pretrained encoder: a transposed-convolution
//! segmentation head, cloud-gap imputation fine-tuning, the three weight
//! regimes (pretrained / random / frozen encoder), and the data-efficiency
//! sweep.

mod cloudgap;
mod seg;
mod sweep;

pub use cloudgap::{cloudgap_finetune_step, infer_gapfill, CloudGapStepResult};
pub use seg::{
    eval_miou, finetune_seg_step, infer_seg, seg_forward, stack_samples, train_seg_with_curve,
    SegDataset, SegModel, SegRunConfig,
};
pub use sweep::{run_data_efficiency_sweep, subsample, sweep_rows_to_csv, SweepRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::MaeError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::raster::RasterChip;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint/config mismatch: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Loss used by the segmentation head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SegLoss {
    /// Weighted cross entropy; weights are normalized to mean one.
    WeightedCrossEntropy { class_weights: Vec<f64> },
    /// Unweighted soft dice.
    Dice,
}

/// Segmentation head geometry: four stride-2 transposed convolutions
/// restore full resolution, then a 1x1 convolution emits the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub classes: usize,
    pub neck_channels: [usize; 4],
    pub loss: SegLoss,
    pub ignore_label: u8,
}

impl SegHeadConfig {
    pub fn new(classes: usize, loss: SegLoss) -> Self {
        Self { classes, neck_channels: [512, 256, 128, 64], loss, ignore_label: 255 }
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.classes < 2 {
            return Err(FinetuneError::Config(format!(
                "classes {} must be >= 2",
                self.classes
            )));
        }
        if self.neck_channels.iter().any(|&c| c == 0) {
            return Err(FinetuneError::Config("zero-width neck stage".into()));
        }
        if let SegLoss::WeightedCrossEntropy { class_weights } = &self.loss {
            if class_weights.len() != self.classes {
                return Err(FinetuneError::Config(format!(
                    "{} class weights for {} classes",
                    class_weights.len(),
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

/// How encoder weights start and whether they move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderInit {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRegime {
    pub encoder_init: EncoderInit,
    pub encoder_trainable: bool,
}

impl FinetuneRegime {
    pub const PRETRAINED: Self =
        Self { encoder_init: EncoderInit::Pretrained, encoder_trainable: true };
    pub const RANDOM: Self =
        Self { encoder_init: EncoderInit::Random, encoder_trainable: true };
    pub const FROZEN: Self =
        Self { encoder_init: EncoderInit::Pretrained, encoder_trainable: false };

    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !self.encoder_trainable && self.encoder_init == EncoderInit::Random {
            return Err(FinetuneError::Config(
                "frozen regime requires pretrained encoder weights".into(),
            ));
        }
        Ok(())
    }
}

/// Patch-aligned two-class labels for the synthetic segmentation task:
/// a patch of the middle timestep is class 1 when its mean value in `band`
/// exceeds the chip-wide median of patch means. Labels are constant within
/// each patch, so the task is linearly separable in token space.
pub fn synthetic_patch_labels(chip: &RasterChip, patch: usize, band: usize) -> Vec<u8> {
    let t_mid = chip.t / 2;
    let (gh, gw) = (chip.h / patch, chip.w / patch);
    let mut means = Vec::with_capacity(gh * gw);
    for h0 in 0..gh {
        for w0 in 0..gw {
            let mut sum = 0.0f64;
            for dy in 0..patch {
                for dx in 0..patch {
                    sum += f64::from(chip.value(t_mid, band, h0 * patch + dy, w0 * patch + dx));
                }
            }
            means.push(sum / (patch * patch) as f64);
        }
    }
    let mut sorted = means.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let mut labels = vec![0u8; chip.h * chip.w];
    for h0 in 0..gh {
        for w0 in 0..gw {
            if means[h0 * gw + w0] > median {
                for dy in 0..patch {
                    let row = (h0 * patch + dy) * chip.w + w0 * patch;
                    for dx in 0..patch {
                        labels[row + dx] = 1;
                    }
                }
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::generate_synthetic_tile;

    #[test]
    fn frozen_regime_requires_pretraining() {
        assert!(FinetuneRegime::FROZEN.validate().is_ok());
        let bad = FinetuneRegime { encoder_init: EncoderInit::Random, encoder_trainable: false };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synthetic_labels_are_patch_aligned_and_two_class() {
        let (chip, _) = generate_synthetic_tile(3, 64, 3, 0.0).unwrap();
        let labels = synthetic_patch_labels(&chip, 16, 3);
        assert_eq!(labels.len(), 64 * 64);
        for h0 in 0..4 {
            for w0 in 0..4 {
                let v = labels[(h0 * 16) * 64 + w0 * 16];
                for dy in 0..16 {
                    for dx in 0..16 {
                        assert_eq!(labels[(h0 * 16 + dy) * 64 + w0 * 16 + dx], v);
                    }
                }
            }
        }
        let ones = labels.iter().filter(|&&l| l == 1).count();
        assert!(ones > 0 && ones < labels.len());
    }

    #[test]
    fn head_config_validation() {
        assert!(SegHeadConfig::new(2, SegLoss::Dice).validate().is_ok());
        assert!(SegHeadConfig::new(1, SegLoss::Dice).validate().is_err());
        let bad = SegHeadConfig::new(
            3,
            SegLoss::WeightedCrossEntropy { class_weights: vec![1.0, 1.0] },
        );
        assert!(bad.validate().is_err());
    }
}
