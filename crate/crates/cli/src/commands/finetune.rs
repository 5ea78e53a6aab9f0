//! `finetune`: segmentation or cloud-gap adaptation of the pretrained
//! encoder.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use geofm_core::finetune::{
    cloudgap_finetune_step, train_seg_with_curve, SegHeadConfig, SegLoss, SegRunConfig,
};
use geofm_core::mae::{standardize_chip_tensor, MaeConfig, MaeModel};
use geofm_core::nn::blocks::init_rng;
use geofm_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use geofm_core::nn::losses::inverse_frequency_weights;
use geofm_core::nn::optim::{AdamWConfig, LrSchedule, ParamStore};
use geofm_core::nn::Tensor;
use geofm_core::raster::{generate_synthetic_tile, QualityMask};
use geofm_core::store::ZarrStore;
use geofm_core::util::derive_seed;

use crate::config::{FinetuneMode, LossName, RunConfig};
use crate::manifest::require_artifact;
use crate::plot::{write_chart, Series};

use super::{load_seg_dataset, salt, split_indices, stats_from_store, Paths};

/// Persisted fine-tune provenance consumed by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneArtifacts {
    pub mode: FinetuneMode,
    pub enc_cfg: MaeConfig,
    pub head_cfg: Option<SegHeadConfig>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.store_dir(), "pack")?;
    let store = ZarrStore::open(paths.store_dir())?;
    let stats = stats_from_store(&store)?;
    let n = store.manifest.sample_count;
    if n < 2 {
        anyhow::bail!("store holds {n} samples, need at least 2 for a split");
    }
    let (train_idx, val_idx) =
        split_indices(n, cfg.eval.val_fraction, derive_seed(cfg.seed, salt::SPLIT));
    if train_idx.is_empty() || val_idx.is_empty() {
        anyhow::bail!("val_fraction {} leaves an empty split", cfg.eval.val_fraction);
    }
    let mae_cfg = cfg.model.to_mae_config(store.manifest.sample_shape);

    let pretrained: Option<ParamStore<f32>> = if cfg.finetune.regime.needs_pretrained() {
        let ckpt_dir = paths.pretrain_dir();
        require_artifact(&ckpt_dir.join("ckpt.json"), "pretrain")?;
        Some(load_checkpoint(&ckpt_dir)?.0)
    } else {
        None
    };

    let dir = paths.finetune_dir();
    std::fs::create_dir_all(&dir)?;

    let head_cfg = match cfg.finetune.mode {
        FinetuneMode::Segmentation => {
            let train =
                load_seg_dataset(&store, &stats, &train_idx, cfg.finetune.label_band)?;
            let val = load_seg_dataset(&store, &stats, &val_idx, cfg.finetune.label_band)?;
            let loss = match cfg.finetune.loss {
                LossName::Dice => SegLoss::Dice,
                LossName::WeightedCrossEntropy => {
                    let flat: Vec<u8> = train.labels.iter().flatten().copied().collect();
                    SegLoss::WeightedCrossEntropy {
                        class_weights: inverse_frequency_weights(
                            &flat,
                            cfg.finetune.classes,
                            255,
                        ),
                    }
                }
            };
            let head = SegHeadConfig {
                classes: cfg.finetune.classes,
                neck_channels: super::finetune_neck(cfg.model.enc_dim),
                loss,
                ignore_label: 255,
            };
            let run = SegRunConfig {
                enc_cfg: mae_cfg.clone(),
                head_cfg: head.clone(),
                regime: cfg.finetune.regime.to_regime(),
                epochs: cfg.finetune.epochs,
                batch_size: cfg.finetune.batch_size,
                max_lr: cfg.finetune.max_lr,
                weight_decay: cfg.finetune.weight_decay,
            };
            let (model, curve) = train_seg_with_curve(
                &run,
                pretrained.as_ref(),
                &train,
                &val,
                derive_seed(cfg.seed, salt::FINETUNE),
            )?;

            let curve_path = dir.join("curve.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
            writeln!(f, "epoch,miou")?;
            for (e, v) in curve.iter().enumerate() {
                writeln!(f, "{e},{v:.6}")?;
            }
            f.flush()?;
            write_chart(
                &paths.plots_dir().join("finetune_curve.svg"),
                "Validation mIoU per epoch",
                "epoch",
                "mIoU",
                &[Series {
                    label: "val".into(),
                    points: curve.iter().enumerate().map(|(e, &v)| (e as f64, v)).collect(),
                }],
            )?;
            save_checkpoint(&dir, &model.params, curve.len() as u64, &init_rng(cfg.seed))?;
            Some(head)
        }
        FinetuneMode::Cloudgap => {
            let mut model = match &pretrained {
                Some(store_params) => {
                    let mut m = MaeModel::<f32>::new(
                        mae_cfg.clone(),
                        derive_seed(cfg.seed, salt::FINETUNE),
                    )?;
                    m.params.load_values_from(store_params).map_err(|e| {
                        anyhow::anyhow!("pretrained checkpoint incompatible: {e}")
                    })?;
                    m
                }
                None => MaeModel::<f32>::new(
                    mae_cfg.clone(),
                    derive_seed(cfg.seed, salt::FINETUNE),
                )?,
            };

            let samples: Vec<Tensor<f32>> = train_idx
                .iter()
                .map(|&i| {
                    let chip = store.read_sample(i)?;
                    Ok(standardize_chip_tensor::<f32>(&chip, &stats)?)
                })
                .collect::<anyhow::Result<_>>()?;
            let masks: Vec<Vec<QualityMask>> = train_idx
                .iter()
                .enumerate()
                .map(|(slot, _)| synth_cloud_masks(cfg, salt::CLOUDGAP_TRAIN_MASKS, slot))
                .collect::<anyhow::Result<_>>()?;

            let steps_per_epoch =
                train_idx.len().div_ceil(cfg.finetune.batch_size).max(1);
            let schedule = LrSchedule::new(
                cfg.finetune.max_lr,
                (cfg.finetune.epochs * steps_per_epoch) as u64,
                0.1,
            )?;
            let opt =
                AdamWConfig { weight_decay: cfg.finetune.weight_decay, ..AdamWConfig::default() };

            let curve_path = dir.join("curve.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
            writeln!(f, "step,loss,used,skipped")?;
            let mut step = 0u64;
            for _epoch in 0..cfg.finetune.epochs {
                for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(cfg.finetune.batch_size)
                {
                    let xs: Vec<Tensor<f32>> =
                        chunk.iter().map(|&i| samples[i].clone()).collect();
                    let ms: Vec<Vec<QualityMask>> =
                        chunk.iter().map(|&i| masks[i].clone()).collect();
                    let result =
                        cloudgap_finetune_step(&mut model, &xs, &ms, &opt, schedule.lr_at(step))?;
                    writeln!(
                        f,
                        "{step},{},{},{}",
                        result.loss.map_or(String::from(""), |l| format!("{l:.8}")),
                        result.used,
                        result.skipped
                    )?;
                    step += 1;
                }
            }
            f.flush()?;
            save_checkpoint(&dir, &model.params, step, &init_rng(cfg.seed))?;
            None
        }
    };

    let artifacts = FinetuneArtifacts {
        mode: cfg.finetune.mode,
        enc_cfg: mae_cfg,
        head_cfg,
        train_indices: train_idx,
        val_indices: val_idx,
    };
    std::fs::write(
        dir.join("finetune_config.json"),
        serde_json::to_string_pretty(&artifacts)? + "\n",
    )?;
    Ok(vec![dir])
}

/// Synthetic cloud masks for gap-filling: only the mask channel of a
/// generated tile, sized to the training window.
pub fn synth_cloud_masks(
    cfg: &RunConfig,
    mask_salt: u64,
    slot: usize,
) -> anyhow::Result<Vec<QualityMask>> {
    let size = cfg.filter.window.max(32);
    let seed = derive_seed(derive_seed(cfg.seed, mask_salt), slot as u64);
    // store samples carry `timesteps_required` dates, so masks match that
    let (_, masks) = generate_synthetic_tile(
        seed,
        size,
        cfg.filter.timesteps_required,
        cfg.finetune.cloud_fraction,
    )?;
    Ok(masks)
}
