//! The masked-autoencoder model: parameters plus graph-building forwards.

use rand_chacha::ChaCha8Rng;

use crate::nn::blocks::{
    conv3d, init_layer_norm, init_linear, init_rng, init_transformer_block, layer_norm, linear,
    transformer_block, trunc_normal,
};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::optim::{GraphParams, ParamStore};
use crate::nn::Scalar;
use crate::util::derive_seed;

use super::posenc::posenc_3d;
use super::{MaeConfig, MaeError, MaskPlan};

/// Parameter name prefixes owned by the encoder side (patch embedding
/// included); fine-tuning regimes freeze or transfer exactly these.
pub const ENCODER_PREFIXES: [&str; 2] = ["embed.", "enc."];

pub struct MaeModel<S: Scalar> {
    pub cfg: MaeConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> MaeModel<S> {
    /// Fresh model with truncated-normal weights (sigma 0.02), zero biases.
    pub fn new(cfg: MaeConfig, seed: u64) -> Result<Self, MaeError> {
        cfg.validate()?;
        let mut rng: ChaCha8Rng = init_rng(derive_seed(seed, 0xAE));
        let mut p = ParamStore::new();
        let k = cfg.patch_len();

        init_encoder_params(&mut p, &cfg, &mut rng)?;

        init_linear(&mut p, "dec.proj", cfg.enc_dim, cfg.dec_dim, &mut rng)?;
        p.insert("dec.mask_token", trunc_normal(&[cfg.dec_dim], 0.02, &mut rng))?;
        for i in 0..cfg.dec_depth {
            init_transformer_block(&mut p, &format!("dec.block{i}"), cfg.dec_dim, &mut rng)?;
        }
        init_layer_norm(&mut p, "dec.ln", cfg.dec_dim)?;
        init_linear(&mut p, "dec.out", cfg.dec_dim, k, &mut rng)?;

        Ok(Self { cfg, params: p })
    }

    /// True for parameters belonging to the encoder (or patch embedding).
    pub fn is_encoder_param(name: &str) -> bool {
        ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    fn check_input(&self, g: &Graph<S>, x: NodeId) -> Result<(), MaeError> {
        let (t, c, h, w) = self.cfg.input;
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1..] != [t, c, h, w] {
            return Err(MaeError::Shape(format!(
                "input {shape:?} does not match configured (B,{t},{c},{h},{w})"
            )));
        }
        Ok(())
    }

    fn check_plans(&self, plans: &[MaskPlan], batch: usize) -> Result<(), MaeError> {
        if plans.len() != batch {
            return Err(MaeError::Shape(format!(
                "{} mask plans for batch of {batch}",
                plans.len()
            )));
        }
        let n = self.cfg.token_count();
        let m = plans[0].visible_count();
        for (i, plan) in plans.iter().enumerate() {
            if plan.total != n {
                return Err(MaeError::Shape(format!(
                    "plan {i} covers {} tokens, model has {n}",
                    plan.total
                )));
            }
            if plan.visible_count() != m {
                return Err(MaeError::Shape(format!(
                    "ragged visible counts in batch: plan {i} has {}, plan 0 has {m}",
                    plan.visible_count()
                )));
            }
        }
        Ok(())
    }

    /// Patch embedding plus encoder positional encoding: `[B, N, D_enc]`.
    pub fn embed(
        &self,
        g: &mut Graph<S>,
        gp: &GraphParams,
        x: NodeId,
    ) -> Result<NodeId, MaeError> {
        self.check_input(g, x)?;
        let weight = gp.get("embed.proj.weight")?;
        let bias = gp.get("embed.proj.bias")?;
        let tokens = conv3d(g, x, weight, bias, self.cfg.patch)?;
        let pos = g.constant(posenc_3d::<S>(self.cfg.grid(), self.cfg.enc_dim)?);
        Ok(g.add(tokens, pos)?)
    }

    /// Encoder over visible tokens only: `[B, visible, D_enc]`. Token rows
    /// are fed in the order given by each plan's `visible` list.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        gp: &GraphParams,
        embedded: NodeId,
        plans: &[MaskPlan],
    ) -> Result<NodeId, MaeError> {
        let batch = g.shape(embedded)[0];
        self.check_plans(plans, batch)?;
        let visible_idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let h = g.gather_tokens(embedded, &visible_idx)?;
        run_encoder_blocks(&self.cfg, g, gp, h)
    }

    /// Encoder with every token visible (the fine-tuning path):
    /// `[B, N, D_enc]`.
    pub fn encode_all(
        &self,
        g: &mut Graph<S>,
        gp: &GraphParams,
        x: NodeId,
    ) -> Result<NodeId, MaeError> {
        let embedded = self.embed(g, gp, x)?;
        run_encoder_blocks(&self.cfg, g, gp, embedded)
    }

    /// Decoder: mask tokens fill the gaps, positional encodings are
    /// re-added, and every token emits its pixel vector: `[B, N, P]`.
    pub fn decode(
        &self,
        g: &mut Graph<S>,
        gp: &GraphParams,
        latent: NodeId,
        plans: &[MaskPlan],
    ) -> Result<NodeId, MaeError> {
        let batch = g.shape(latent)[0];
        self.check_plans(plans, batch)?;
        let visible_idx: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let n = self.cfg.token_count();

        let projected = linear(g, gp, "dec.proj", latent)?;
        let mask_token = gp.get("dec.mask_token")?;
        let full = g.scatter_tokens(projected, mask_token, &visible_idx, n)?;
        let pos = g.constant(posenc_3d::<S>(self.cfg.grid(), self.cfg.dec_dim)?);
        let mut h = g.add(full, pos)?;
        for i in 0..self.cfg.dec_depth {
            h = transformer_block(g, gp, &format!("dec.block{i}"), h, self.cfg.dec_heads)?;
        }
        let normed = layer_norm(g, gp, "dec.ln", h)?;
        Ok(linear(g, gp, "dec.out", normed)?)
    }

    /// Embed, encode visible tokens, decode to per-token pixel vectors.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        gp: &GraphParams,
        x: NodeId,
        plans: &[MaskPlan],
    ) -> Result<NodeId, MaeError> {
        let embedded = self.embed(g, gp, x)?;
        let latent = self.encode(g, gp, embedded, plans)?;
        self.decode(g, gp, latent, plans)
    }
}

/// Shared encoder trunk: transformer blocks plus the final norm, over
/// whatever token rows are fed in (gathered or full).
pub(crate) fn run_encoder_blocks<S: Scalar>(
    cfg: &MaeConfig,
    g: &mut Graph<S>,
    gp: &GraphParams,
    mut h: NodeId,
) -> Result<NodeId, MaeError> {
    for i in 0..cfg.enc_depth {
        h = transformer_block(g, gp, &format!("enc.block{i}"), h, cfg.enc_heads)?;
    }
    Ok(layer_norm(g, gp, "enc.ln", h)?)
}

/// Registers the encoder-side parameters (patch embedding, blocks, final
/// norm) into a store; shared by pretraining and fine-tuning models.
pub(crate) fn init_encoder_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &MaeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), MaeError> {
    init_linear(store, "embed.proj", cfg.patch_len(), cfg.enc_dim, rng)?;
    for i in 0..cfg.enc_depth {
        init_transformer_block(store, &format!("enc.block{i}"), cfg.enc_dim, rng)?;
    }
    init_layer_norm(store, "enc.ln", cfg.enc_dim)?;
    Ok(())
}
