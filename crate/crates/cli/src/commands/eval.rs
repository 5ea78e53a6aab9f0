//! `eval`: metric evaluation of the fine-tuned model on the held-out
//! split, with preview images for the gap-filling mode.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use geofm_core::finetune::{infer_gapfill, infer_seg, SegModel};
use geofm_core::mae::MaeModel;
use geofm_core::metrics::{
    masked_rmse_mae, ssim_multiband, summarize, ConfusionMatrix, MetricsReport, SsimParams,
};
use geofm_core::nn::checkpoint::load_checkpoint;
use geofm_core::raster::{write_chip, write_rgb_png, ChipData, RasterChip};
use geofm_core::store::ZarrStore;

use crate::config::{canonical_bytes, FinetuneMode, RunConfig};
use crate::manifest::require_artifact;

use super::finetune::{synth_cloud_masks, FinetuneArtifacts};
use super::{load_seg_dataset, salt, stats_from_store, Paths};

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.store_dir(), "pack")?;
    let ft_dir = paths.finetune_dir();
    require_artifact(&ft_dir.join("finetune_config.json"), "finetune")?;
    require_artifact(&ft_dir.join("ckpt.json"), "finetune")?;

    let artifacts: FinetuneArtifacts =
        serde_json::from_str(&std::fs::read_to_string(ft_dir.join("finetune_config.json"))?)?;
    let store = ZarrStore::open(paths.store_dir())?;
    let stats = stats_from_store(&store)?;
    let (params, _, _) = load_checkpoint(&ft_dir)?;

    let eval_dir = paths.eval_dir();
    std::fs::create_dir_all(&eval_dir)?;

    let mut report = match artifacts.mode {
        FinetuneMode::Segmentation => {
            let head_cfg = artifacts
                .head_cfg
                .clone()
                .ok_or_else(|| anyhow::anyhow!("segmentation artifacts missing head config"))?;
            let mut model =
                SegModel::<f32>::new(artifacts.enc_cfg.clone(), head_cfg.clone(), 0)?;
            model.params.load_values_from(&params).map_err(|e| {
                anyhow::anyhow!("checkpoint/config mismatch: {e}")
            })?;
            let val = load_seg_dataset(
                &store,
                &stats,
                &artifacts.val_indices,
                cfg.finetune.label_band,
            )?;
            let mut cm = ConfusionMatrix::new(head_cfg.classes);
            for (x, labels) in val.samples.iter().zip(&val.labels) {
                let pred = infer_seg(&model, x)?;
                cm.accumulate(&pred, labels, head_cfg.ignore_label)?;
            }
            summarize(&cm)?
        }
        FinetuneMode::Cloudgap => {
            let mut model = MaeModel::<f32>::new(artifacts.enc_cfg.clone(), 0)?;
            model.params.load_values_from(&params).map_err(|e| {
                anyhow::anyhow!("checkpoint/config mismatch: {e}")
            })?;
            gapfill_report(cfg, &store, &model, &artifacts, &stats, &eval_dir)?
        }
    };
    report.config_hash = Some(config_hash(cfg));

    std::fs::write(
        eval_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(eval_dir.join("metrics.csv"), report.to_class_csv())?;
    log::info!(
        "eval: mIoU {:.4}, rmse {:?}, ssim {:?}",
        report.mean_iou,
        report.rmse,
        report.ssim
    );
    Ok(vec![eval_dir])
}

fn gapfill_report(
    cfg: &RunConfig,
    store: &std::sync::Arc<ZarrStore>,
    model: &MaeModel<f32>,
    artifacts: &FinetuneArtifacts,
    stats: &geofm_core::raster::BandStats,
    eval_dir: &std::path::Path,
) -> anyhow::Result<MetricsReport> {
    let (t, c, h, w) = store.manifest.sample_shape;
    let t_mid = t / 2;
    let plane = h * w;
    let mut sq_sum = 0.0f64;
    let mut ab_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    let mut used = 0usize;
    let mut previews = 0usize;

    for (slot, &i) in artifacts.val_indices.iter().enumerate() {
        let chip = store.read_sample(i)?;
        let masks = synth_cloud_masks(cfg, salt::CLOUDGAP_EVAL_MASKS, slot)?;
        let (filled, plan) = infer_gapfill(model, &chip, &masks, stats)?;
        let Some(plan) = plan else { continue };

        // per-pixel mask over the middle timestep from the plan footprint
        let (gt_, gh, gw) = model.cfg.grid();
        let (_, ph, pw) = model.cfg.patch;
        debug_assert_eq!(gt_, t);
        let masked_tokens: std::collections::HashSet<usize> =
            plan.masked.iter().copied().collect();
        let mut mask = vec![false; c * plane];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let token = (t_mid * gh + y / ph) * gw + x / pw;
                    if masked_tokens.contains(&token) {
                        mask[(ci * h + y) * w + x] = true;
                    }
                }
            }
        }
        let pred_mid = frame(&filled, t_mid);
        let true_mid = frame(&chip, t_mid);
        let (rmse, mae) = masked_rmse_mae(&pred_mid, &true_mid, &mask)?;
        sq_sum += rmse * rmse;
        ab_sum += mae;
        ssim_sum += ssim_multiband(&pred_mid, &true_mid, (c, h, w), &SsimParams::default())?;
        used += 1;

        if previews < 2 {
            let stem = eval_dir.join(format!("preview_{i}"));
            write_rgb_png(&chip, t_mid, stem.with_extension("input.png"))?;
            write_rgb_png(&filled, t_mid, stem.with_extension("filled.png"))?;
            write_chip(&filled, stem.with_extension("gfmc"))?;
            previews += 1;
        }
    }
    if used == 0 {
        anyhow::bail!("no validation sample carried clouds; raise finetune.cloud_fraction");
    }
    Ok(MetricsReport {
        class_iou: vec![],
        class_f1: vec![],
        class_acc: vec![],
        mean_iou: 0.0,
        mean_f1: 0.0,
        mean_acc: 0.0,
        overall_acc: 0.0,
        evaluated_pixels: (used * c * plane) as u64,
        ignored_pixels: 0,
        rmse: Some((sq_sum / used as f64).sqrt()),
        mae: Some(ab_sum / used as f64),
        ssim: Some(ssim_sum / used as f64),
        config_hash: None,
    })
}

/// One timestep of a chip as `(C, H, W)` f32 values.
fn frame(chip: &RasterChip, t: usize) -> Vec<f32> {
    let plane = chip.h * chip.w;
    let base = t * chip.c * plane;
    match &chip.data {
        ChipData::U16(v) => v[base..base + chip.c * plane].iter().map(|&x| f32::from(x)).collect(),
        ChipData::F32(v) => v[base..base + chip.c * plane].to_vec(),
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_bytes(cfg));
    crate::manifest::hex(&hasher.finalize())
}
