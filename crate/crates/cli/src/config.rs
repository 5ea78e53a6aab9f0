//! Run configuration: one JSON document with a section per stage, so a
//! single file reproduces an experiment end to end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geofm_core::finetune::{EncoderInit, FinetuneRegime};
use geofm_core::mae::MaeConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub sampler: SamplerConfig,
    pub filter: FilterConfig,
    pub store: StoreConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub tiles: usize,
    pub size: usize,
    pub timesteps: usize,
    pub cloud_fraction: f64,
    /// Also split tiles into per-(date, band) files for the baseline
    /// loader comparison.
    #[serde(default)]
    pub per_band_files: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub g1: usize,
    pub g2: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub window: usize,
    pub bad_fraction_threshold: f64,
    pub timesteps_required: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    pub chunk_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
}

impl ModelConfig {
    /// Full MAE config once the sample shape is known from the store.
    pub fn to_mae_config(&self, input: (usize, usize, usize, usize)) -> MaeConfig {
        MaeConfig {
            input,
            patch: (1, 16, 16),
            enc_dim: self.enc_dim,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            mask_ratio: self.mask_ratio,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub prefetch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Segmentation,
    Cloudgap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeName {
    Pretrained,
    Random,
    Frozen,
}

impl RegimeName {
    pub fn to_regime(self) -> FinetuneRegime {
        match self {
            RegimeName::Pretrained => FinetuneRegime::PRETRAINED,
            RegimeName::Random => FinetuneRegime::RANDOM,
            RegimeName::Frozen => FinetuneRegime::FROZEN,
        }
    }

    pub fn needs_pretrained(self) -> bool {
        self.to_regime().encoder_init == EncoderInit::Pretrained
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    WeightedCrossEntropy,
    Dice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub regime: RegimeName,
    pub classes: usize,
    pub loss: LossName,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Band driving the synthetic segmentation labels.
    pub label_band: usize,
    /// Cloud fraction of the synthetic masks used in cloud-gap mode.
    pub cloud_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of samples held out for validation/evaluation.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
}

/// Loads and validates a run config; schema violations report the JSON
/// pointer of the offending field.
pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&raw);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        anyhow::anyhow!(
            "config {}: schema violation at /{}: {}",
            path.display(),
            e.path().to_string().replace('.', "/"),
            e.inner()
        )
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.synth.size < 32 {
        anyhow::bail!("synth.size must be >= 32");
    }
    if cfg.filter.window > cfg.synth.size {
        anyhow::bail!("filter.window exceeds synth.size");
    }
    if cfg.filter.window % 16 != 0 {
        anyhow::bail!("filter.window must be a multiple of the 16-pixel patch");
    }
    if cfg.synth.timesteps < cfg.filter.timesteps_required {
        anyhow::bail!("synth.timesteps below filter.timesteps_required");
    }
    if !(0.0..=1.0).contains(&cfg.eval.val_fraction) {
        anyhow::bail!("eval.val_fraction outside [0,1]");
    }
    Ok(())
}

/// Canonical bytes of the config for manifests and reproducibility hashes.
pub fn canonical_bytes(cfg: &RunConfig) -> Vec<u8> {
    serde_json::to_vec(cfg).expect("config serializes")
}
