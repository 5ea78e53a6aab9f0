//! `sweep`: data-efficiency sweep over training-set fractions.

use std::path::PathBuf;

use serde::Serialize;

use geofm_core::finetune::{
    run_data_efficiency_sweep, sweep_rows_to_csv, SegHeadConfig, SegLoss, SegRunConfig,
};
use geofm_core::nn::checkpoint::load_checkpoint;
use geofm_core::nn::losses::inverse_frequency_weights;
use geofm_core::store::ZarrStore;
use geofm_core::util::derive_seed;

use crate::config::{LossName, RunConfig};
use crate::manifest::require_artifact;
use crate::plot::{write_chart, Series};

use super::{load_seg_dataset, salt, split_indices, stats_from_store, Paths};

#[derive(Debug, Serialize)]
struct SweepSummary {
    fractions: Vec<f64>,
    mean_miou: Vec<f64>,
    std_miou: Vec<f64>,
    /// Report-only flag: does the half-data run stay within 10 points of
    /// the full-data run?
    half_within_10_points: Option<bool>,
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.store_dir(), "pack")?;
    let store = ZarrStore::open(paths.store_dir())?;
    let stats = stats_from_store(&store)?;
    let n = store.manifest.sample_count;
    let (train_idx, val_idx) =
        split_indices(n, cfg.eval.val_fraction, derive_seed(cfg.seed, salt::SPLIT));
    let train = load_seg_dataset(&store, &stats, &train_idx, cfg.finetune.label_band)?;
    let val = load_seg_dataset(&store, &stats, &val_idx, cfg.finetune.label_band)?;

    let pretrained = if cfg.finetune.regime.needs_pretrained() {
        require_artifact(&paths.pretrain_dir().join("ckpt.json"), "pretrain")?;
        Some(load_checkpoint(paths.pretrain_dir())?.0)
    } else {
        None
    };

    let loss = match cfg.finetune.loss {
        LossName::Dice => SegLoss::Dice,
        LossName::WeightedCrossEntropy => {
            let flat: Vec<u8> = train.labels.iter().flatten().copied().collect();
            SegLoss::WeightedCrossEntropy {
                class_weights: inverse_frequency_weights(&flat, cfg.finetune.classes, 255),
            }
        }
    };
    let run_cfg = SegRunConfig {
        enc_cfg: cfg.model.to_mae_config(store.manifest.sample_shape),
        head_cfg: SegHeadConfig {
            classes: cfg.finetune.classes,
            neck_channels: super::finetune_neck(cfg.model.enc_dim),
            loss,
            ignore_label: 255,
        },
        regime: cfg.finetune.regime.to_regime(),
        epochs: cfg.sweep.epochs,
        batch_size: cfg.finetune.batch_size,
        max_lr: cfg.finetune.max_lr,
        weight_decay: cfg.finetune.weight_decay,
    };

    let rows = run_data_efficiency_sweep(
        &run_cfg,
        pretrained.as_ref(),
        &train,
        &val,
        &cfg.sweep.fractions,
        &cfg.sweep.seeds,
    )?;

    let dir = paths.sweep_dir();
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("sweep.csv");
    std::fs::write(&csv_path, sweep_rows_to_csv(&rows))?;

    // per-fraction mean and std across seeds
    let mut fractions: Vec<f64> = cfg.sweep.fractions.clone();
    fractions.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut mean_miou = Vec::new();
    let mut std_miou = Vec::new();
    for &f in &fractions {
        let vals: Vec<f64> =
            rows.iter().filter(|r| r.fraction == f).map(|r| r.value).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        mean_miou.push(mean);
        std_miou.push(var.sqrt());
    }
    let half_within = fraction_gap(&fractions, &mean_miou, 1.0, 0.5).map(|gap| gap <= 0.10);
    if let Some(false) = half_within {
        log::warn!("half-data mIoU falls more than 10 points below full data (report-only)");
    }
    let summary = SweepSummary {
        fractions: fractions.clone(),
        mean_miou: mean_miou.clone(),
        std_miou: std_miou.clone(),
        half_within_10_points: half_within,
    };
    let summary_path = dir.join("sweep_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    let svg = paths.plots_dir().join("sweep.svg");
    let mut summary_csv = String::from("fraction,mean_miou,std_miou\n");
    for ((f, m), s) in fractions.iter().zip(&mean_miou).zip(&std_miou) {
        summary_csv.push_str(&format!("{f},{m:.6},{s:.6}\n"));
    }
    std::fs::write(dir.join("sweep_summary.csv"), summary_csv)?;
    write_chart(
        &svg,
        "Data efficiency: validation mIoU vs training fraction",
        "fraction of labeled training data",
        "mIoU",
        &[Series {
            label: "mean over seeds".into(),
            points: fractions.iter().copied().zip(mean_miou.iter().copied()).collect(),
        }],
    )?;
    Ok(vec![csv_path, summary_path, svg])
}

fn fraction_gap(
    fractions: &[f64],
    means: &[f64],
    full: f64,
    half: f64,
) -> Option<f64> {
    let at = |target: f64| {
        fractions
            .iter()
            .position(|&f| (f - target).abs() < 1e-9)
            .map(|i| means[i])
    };
    Some((at(full)? - at(half)?).abs())
}
