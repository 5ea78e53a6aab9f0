//! `pack`: band statistics plus chunked-store packing.

use std::path::PathBuf;

use geofm_core::quality::read_index;
use geofm_core::raster::{compute_band_stats, read_chip};
use geofm_core::sampler::read_sample;
use geofm_core::store::{pack, DirChipSource};

use crate::config::RunConfig;
use crate::manifest::require_artifact;

use super::{filter::load_masks, Paths};

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.index_jsonl(), "filter")?;
    require_artifact(&paths.tiles_dir(), "synth")?;
    require_artifact(&paths.sampled_tiles(), "sample")?;

    // band statistics over the sampled tiles, quality-masked
    let codes = read_sample(paths.sampled_tiles())?;
    let mut chips_masks = Vec::new();
    for code in &codes {
        let dir = paths.tiles_dir().join(code);
        let chip = read_chip(dir.join("chip.gfmc"))?;
        let masks = load_masks(&dir)?;
        chips_masks.push((chip, masks));
    }
    let stats =
        compute_band_stats(chips_masks.iter().map(|(c, m)| (c, Some(m.as_slice()))))?;
    std::fs::write(paths.stats_json(), serde_json::to_string_pretty(&stats)? + "\n")?;
    log::info!(
        "band stats over {} pixels: mean[0] = {:.1}, std[0] = {:.1}",
        stats.pixel_count,
        stats.mean[0],
        stats.std[0]
    );

    let entries = read_index(paths.index_jsonl())?;
    let source = DirChipSource::new(paths.tiles_dir());
    let manifest = pack(
        &entries,
        &source,
        Some(&stats),
        paths.store_dir(),
        cfg.store.chunk_samples,
    )?;
    log::info!(
        "packed {} samples of {:?} into {} chunks",
        manifest.sample_count,
        manifest.sample_shape,
        manifest.chunk_count()
    );
    Ok(vec![paths.store_dir(), paths.stats_json()])
}
