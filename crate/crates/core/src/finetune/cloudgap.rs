//! Cloud-gap imputation fine-tuning: the quality mask of the middle
//! timestep drives the mask plan, the RMSE over masked pixels is the loss,
//! and the full MAE (encoder and decoder) updates.

use crate::mae::{
    make_mask_plan_from_quality, reconstruct_image, MaeError, MaeModel, MaskPlan,
};
use crate::nn::losses::masked_rmse;
use crate::nn::optim::AdamWConfig;
use crate::nn::{Graph, Tensor};
use crate::raster::{BandStats, ChipData, QualityMask, RasterChip};

use super::FinetuneError;

#[derive(Debug, Clone, PartialEq)]
pub struct CloudGapStepResult {
    /// Mean per-sample RMSE over the samples that carried clouds; `None`
    /// when every sample in the batch was skipped.
    pub loss: Option<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// One fine-tuning step over per-sample tensors (`[1, T, C, H, W]`,
/// standardized) with their per-timestep quality masks. Samples whose
/// middle timestep is fully clear are skipped and counted.
pub fn cloudgap_finetune_step(
    model: &mut MaeModel<f32>,
    samples: &[Tensor<f32>],
    masks: &[Vec<QualityMask>],
    opt: &AdamWConfig,
    lr: f64,
) -> Result<CloudGapStepResult, FinetuneError> {
    if samples.len() != masks.len() {
        return Err(FinetuneError::Shape(format!(
            "{} samples with {} mask sets",
            samples.len(),
            masks.len()
        )));
    }
    let (gt, _, _) = model.cfg.grid();
    let (_, ph, pw) = model.cfg.patch;
    let target_t = gt / 2;

    let mut plans: Vec<(usize, MaskPlan)> = Vec::new();
    let mut skipped = 0usize;
    for (i, mask_set) in masks.iter().enumerate() {
        match make_mask_plan_from_quality(model.cfg.grid(), (ph, pw), mask_set, target_t) {
            Ok(plan) => plans.push((i, plan)),
            Err(MaeError::EmptyMask(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if plans.is_empty() {
        return Ok(CloudGapStepResult { loss: None, used: 0, skipped });
    }

    // per-sample branches in one graph: quality plans are ragged, so each
    // sample runs at batch size one and the losses average
    let mut g = Graph::<f32>::new();
    let gp = model.params.stage(&mut g, |_| true);
    let mut total = None;
    for (i, plan) in &plans {
        let xid = g.constant(samples[*i].clone());
        let pred = model.forward(&mut g, &gp, xid, std::slice::from_ref(plan))?;
        let target = g.patchify(xid, model.cfg.patch)?;
        let rmse = masked_rmse(&mut g, pred, target, &[plan.masked.clone()])?;
        total = Some(match total {
            None => rmse,
            Some(acc) => g.add(acc, rmse)?,
        });
    }
    let loss = g.scale(total.expect("non-empty"), 1.0 / plans.len() as f64);
    let loss_val = f64::from(g.value(loss).item()?);
    let grads = g.backward(loss)?;
    model.params.collect_grads(&gp, &grads)?;
    model.params.adamw_step(opt, lr, |_| true)?;
    model.params.clear_grads();
    Ok(CloudGapStepResult { loss: Some(loss_val), used: plans.len(), skipped })
}

/// Gap filling: predictions replace pixels of cloud-masked patches in the
/// middle timestep; every clear pixel passes through unchanged. A fully
/// clear mask returns the input (cast to f32) untouched.
pub fn infer_gapfill(
    model: &MaeModel<f32>,
    chip: &RasterChip,
    masks: &[QualityMask],
    stats: &BandStats,
) -> Result<(RasterChip, Option<MaskPlan>), FinetuneError> {
    let (gt, _, _) = model.cfg.grid();
    let (_, ph, pw) = model.cfg.patch;
    let target_t = gt / 2;
    match make_mask_plan_from_quality(model.cfg.grid(), (ph, pw), masks, target_t) {
        Ok(plan) => {
            let filled = reconstruct_image(model, chip, stats, &plan)?;
            Ok((filled, Some(plan)))
        }
        Err(MaeError::EmptyMask(_)) => {
            let passthrough = RasterChip {
                data: ChipData::F32(chip.data.to_f32_vec()),
                band_names: chip.band_names.clone(),
                timestamps: chip.timestamps.clone(),
                origin: chip.origin.clone(),
                ..*chip
            };
            Ok((passthrough, None))
        }
        Err(e) => Err(e.into()),
    }
}
