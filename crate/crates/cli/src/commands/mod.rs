//! Pipeline stage implementations.

pub mod eval;
pub mod filter;
pub mod finetune;
pub mod pack;
pub mod plot_cmd;
pub mod pretrain;
pub mod sample;
pub mod sweep;
pub mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use geofm_core::finetune::{synthetic_patch_labels, SegDataset};
use geofm_core::mae::standardize_chip_tensor;
use geofm_core::raster::BandStats;
use geofm_core::store::ZarrStore;
use geofm_core::util::derive_seed;

/// Canonical artifact locations under the run's output directory.
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    pub fn tiles_dir(&self) -> PathBuf {
        self.out.join("tiles")
    }
    pub fn climate_csv(&self) -> PathBuf {
        self.out.join("climate.csv")
    }
    pub fn sampled_tiles(&self) -> PathBuf {
        self.out.join("sampled_tiles.txt")
    }
    pub fn index_jsonl(&self) -> PathBuf {
        self.out.join("index.jsonl")
    }
    pub fn stats_json(&self) -> PathBuf {
        self.out.join("stats.json")
    }
    pub fn store_dir(&self) -> PathBuf {
        self.out.join("store")
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.out.join("pretrain")
    }
    pub fn finetune_dir(&self) -> PathBuf {
        self.out.join("finetune")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.out.join("sweep")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.out.join("plots")
    }
}

/// Seed salts per stage so stage RNG streams stay independent.
pub mod salt {
    pub const SYNTH: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const LOADER: u64 = 4;
    pub const MASKS: u64 = 5;
    pub const SPLIT: u64 = 7;
    pub const FINETUNE: u64 = 8;
    pub const CLOUDGAP_TRAIN_MASKS: u64 = 9;
    pub const CLOUDGAP_EVAL_MASKS: u64 = 10;
}

/// Train/validation split over sample indices; deterministic in the seed.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let val_count = ((val_fraction * n as f64).floor() as usize).min(n);
    let val = order[..val_count].to_vec();
    let train = order[val_count..].to_vec();
    (train, val)
}

/// Loads store samples into an in-memory segmentation dataset with
/// synthetic patch-aligned labels.
pub fn load_seg_dataset(
    store: &Arc<ZarrStore>,
    stats: &BandStats,
    indices: &[usize],
    label_band: usize,
) -> anyhow::Result<SegDataset> {
    let mut samples = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let chip = store.read_sample(i)?;
        samples.push(standardize_chip_tensor::<f32>(&chip, stats)?);
        labels.push(synthetic_patch_labels(&chip, 16, label_band));
    }
    Ok(SegDataset { samples, labels })
}

/// Band stats recorded at pack time; absent stats mean the pack stage ran
/// with an incompatible configuration.
pub fn stats_from_store(store: &ZarrStore) -> anyhow::Result<BandStats> {
    store
        .manifest
        .band_stats
        .clone()
        .ok_or_else(|| anyhow::anyhow!("store manifest carries no band stats — re-run `pack`"))
}

/// Neck widths scaled to the encoder dim, capped at the published
/// 512/256/128/64 schedule.
pub fn finetune_neck(enc_dim: usize) -> [usize; 4] {
    [
        (enc_dim * 2).clamp(8, 512),
        enc_dim.clamp(8, 256),
        (enc_dim / 2).clamp(8, 128),
        (enc_dim / 4).clamp(8, 64),
    ]
}

/// Per-sample mask-plan seed for pretraining.
pub fn mask_seed(run_seed: u64, step: u64, slot: usize) -> u64 {
    derive_seed(derive_seed(run_seed, salt::MASKS), step * 4096 + slot as u64)
}
