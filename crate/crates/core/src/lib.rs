//! Desk-scale pipeline for pretraining and fine-tuning a geospatial
//! masked-autoencoder on multispectral image chips.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`raster`]: chip/mask types, the on-disk chip container, band
//!   statistics and a synthetic tile generator.
//! - [`sampler`]: stratified tile sampling over aggregate climate
//!   statistics.
//! - [`quality`]: offline cloud/no-data filtering that emits an index of
//!   good-quality sub-regions.
//! - [`store`]: a chunked array store (Zarr v2 directory layout) plus a
//!   deterministic prefetching batch loader.
//! - [`nn`]: a minimal reverse-mode autodiff core with exactly the layers,
//!   losses and optimizer the model needs.
//! - [`mae`]: the masked autoencoder with 3D sine-cosine positional
//!   encodings and tubelet patch embedding.
//! - [`finetune`]: segmentation and cloud-gap-imputation heads over the
//!   pretrained encoder.
//! - [`metrics`]: IoU/F1/accuracy, masked RMSE/MAE and SSIM.

pub mod finetune;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod quality;
pub mod raster;
pub mod sampler;
pub mod store;
pub mod util;

pub use finetune::{FinetuneRegime, SegHeadConfig, SegLoss, SegModel};
pub use mae::{MaeConfig, MaeModel, MaskPlan};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use nn::{LrSchedule, ParamStore, Tensor};
pub use quality::{ChipIndexEntry, FilterPolicy};
pub use raster::{BandStats, QualityCode, QualityMask, RasterChip, TileId};
pub use sampler::{ClimateGrid, GroupAssignment};
pub use store::{LoaderConfig, StoreManifest, ZarrStore};
