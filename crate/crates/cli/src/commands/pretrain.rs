//! `pretrain`: masked-autoencoder pretraining over the packed store.

use std::io::Write;
use std::path::PathBuf;

use geofm_core::mae::{batch_tensor, make_mask_plan, pretrain_step, MaeModel, MaskPlan};
use geofm_core::nn::blocks::init_rng;
use geofm_core::nn::checkpoint::save_checkpoint;
use geofm_core::nn::optim::{AdamWConfig, LrSchedule};
use geofm_core::store::{BatchIter, LoaderConfig, ZarrStore};
use geofm_core::util::derive_seed;

use crate::config::RunConfig;
use crate::manifest::require_artifact;
use crate::plot::{csv_columns, write_chart, Series};

use super::{mask_seed, salt, stats_from_store, Paths};

pub fn run(cfg: &RunConfig, workers: usize) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.store_dir(), "pack")?;
    let store = ZarrStore::open(paths.store_dir())?;
    let stats = stats_from_store(&store)?;
    let mae_cfg = cfg.model.to_mae_config(store.manifest.sample_shape);
    mae_cfg.validate()?;

    let mut model =
        MaeModel::<f32>::new(mae_cfg.clone(), derive_seed(cfg.seed, salt::PRETRAIN_INIT))?;
    log::info!(
        "model: {} tokens, {} parameters",
        mae_cfg.token_count(),
        model.params.total_values()
    );
    let schedule = LrSchedule::new(cfg.train.max_lr, cfg.train.steps, cfg.train.warmup_fraction)?;
    let opt = AdamWConfig { weight_decay: cfg.train.weight_decay, ..AdamWConfig::default() };
    let loader_cfg = LoaderConfig {
        batch_size: cfg.train.batch_size,
        workers,
        prefetch: cfg.train.prefetch,
        shuffle_seed: derive_seed(cfg.seed, salt::LOADER),
    };

    let dir = paths.pretrain_dir();
    std::fs::create_dir_all(&dir)?;
    let log_path = dir.join("loss_log.csv");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log_file, "step,loss,lr")?;

    let n_tokens = mae_cfg.token_count();
    let mut step = 0u64;
    'train: for epoch in 0.. {
        let batches = BatchIter::new(store.clone(), loader_cfg.clone(), epoch)?;
        for batch in batches {
            let batch = batch?;
            let x = batch_tensor::<f32>(&batch, &stats)?;
            let plans: Vec<MaskPlan> = (0..batch.sample_ids.len())
                .map(|slot| {
                    make_mask_plan(n_tokens, mae_cfg.mask_ratio, mask_seed(cfg.seed, step, slot))
                })
                .collect::<Result<_, _>>()?;
            let loss = pretrain_step(&mut model, &x, &plans, &opt, &schedule, step)?;
            let lr = schedule.lr_at(step);
            writeln!(log_file, "{step},{loss:.8},{lr:.8e}")?;
            if step % 25 == 0 {
                log::info!("step {step}: loss {loss:.5}, lr {lr:.2e}");
            }
            step += 1;
            if step >= cfg.train.steps {
                break 'train;
            }
        }
        if store.manifest.sample_count < cfg.train.batch_size {
            anyhow::bail!("store too small for one batch");
        }
    }
    log_file.flush()?;

    save_checkpoint(&dir, &model.params, step, &init_rng(derive_seed(cfg.seed, salt::LOADER)))?;
    std::fs::write(
        dir.join("model_config.json"),
        serde_json::to_string_pretty(&mae_cfg)? + "\n",
    )?;

    let points = csv_columns(&log_path, "step", "loss")?;
    let svg = paths.plots_dir().join("pretrain_loss.svg");
    write_chart(
        &svg,
        "Masked reconstruction loss",
        "step",
        "loss",
        &[Series { label: "train".into(), points }],
    )?;
    Ok(vec![dir, svg])
}
