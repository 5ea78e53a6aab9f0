//! Masked autoencoder over spatiotemporal chips.
//!
//! Tubelet patch embedding (3D convolution with stride = kernel), a 3D
//! sine-cosine positional encoding, an asymmetric encoder/decoder where
//! the encoder sees only visible tokens and the decoder rebuilds the full
//! sequence from a shared learned mask token, and a masked-pixel MSE
//! objective.

mod mask;
mod model;
mod posenc;
mod train;

pub use mask::{make_mask_plan, make_mask_plan_from_quality, MaskOrigin, MaskPlan};
pub use model::MaeModel;
pub(crate) use model::init_encoder_params;
pub use posenc::posenc_3d;
pub use train::{batch_tensor, pretrain_step, reconstruct_image, standardize_chip_tensor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;
use crate::raster::RasterError;

#[derive(Debug, Error)]
pub enum MaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: u64, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Model geometry and masking ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    /// Input `(T, C, H, W)`.
    pub input: (usize, usize, usize, usize),
    /// Tubelet `(pt, ph, pw)`; `pt = 1` keeps one date per patch.
    pub patch: (usize, usize, usize),
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
}

impl MaeConfig {
    /// Decoder defaults: half the encoder width, depth 4.
    pub fn with_decoder_defaults(
        input: (usize, usize, usize, usize),
        patch: (usize, usize, usize),
        enc_dim: usize,
        enc_depth: usize,
        enc_heads: usize,
        mask_ratio: f64,
    ) -> Self {
        Self {
            input,
            patch,
            enc_dim,
            enc_depth,
            enc_heads,
            dec_dim: enc_dim / 2,
            dec_depth: 4,
            dec_heads: enc_heads,
            mask_ratio,
        }
    }

    pub fn validate(&self) -> Result<(), MaeError> {
        let (t, c, h, w) = self.input;
        let (pt, ph, pw) = self.patch;
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(MaeError::Config(format!("degenerate input {:?}", self.input)));
        }
        if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
            return Err(MaeError::Config(format!(
                "patch {:?} must divide input (T,H,W) = ({t},{h},{w})",
                self.patch
            )));
        }
        for (what, dim, heads) in
            [("encoder", self.enc_dim, self.enc_heads), ("decoder", self.dec_dim, self.dec_heads)]
        {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(MaeError::Config(format!(
                    "{what}: heads {heads} must divide dim {dim}"
                )));
            }
            if dim % 16 != 0 {
                return Err(MaeError::Config(format!(
                    "{what} dim {dim} must be divisible by 16 for the 3D positional encoding"
                )));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(MaeError::Config(format!(
                "mask_ratio {} outside (0,1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    /// Token grid `(T/pt, H/ph, W/pw)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let (t, _, h, w) = self.input;
        let (pt, ph, pw) = self.patch;
        (t / pt, h / ph, w / pw)
    }

    pub fn token_count(&self) -> usize {
        let (gt, gh, gw) = self.grid();
        gt * gh * gw
    }

    /// Per-token pixel vector length `pt*ph*pw*C`.
    pub fn patch_len(&self) -> usize {
        let (_, c, _, _) = self.input;
        let (pt, ph, pw) = self.patch;
        pt * ph * pw * c
    }

    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.token_count() as f64).round() as usize
    }

    pub fn visible_count(&self) -> usize {
        self.token_count() - self.masked_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry_token_arithmetic() {
        let cfg = MaeConfig::with_decoder_defaults(
            (3, 6, 224, 224),
            (1, 16, 16),
            768,
            12,
            12,
            0.75,
        );
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), (3, 14, 14));
        assert_eq!(cfg.token_count(), 588);
        assert_eq!(cfg.masked_count(), 441);
        assert_eq!(cfg.visible_count(), 147);
        assert_eq!(cfg.patch_len(), 16 * 16 * 6);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut cfg = MaeConfig::with_decoder_defaults(
            (3, 6, 224, 224),
            (1, 16, 16),
            64,
            2,
            4,
            0.75,
        );
        cfg.patch = (2, 16, 16); // 2 does not divide 3
        assert!(cfg.validate().is_err());
        cfg.patch = (1, 16, 16);
        cfg.enc_dim = 72; // not divisible by 16
        assert!(cfg.validate().is_err());
        cfg.enc_dim = 64;
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
    }
}
