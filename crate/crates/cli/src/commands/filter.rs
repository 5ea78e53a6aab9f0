//! `filter`: offline quality filtering of sampled tiles into the index.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use geofm_core::quality::{filter_tile, write_index, ChipIndexEntry, FilterPolicy};
use geofm_core::raster::{read_mask, QualityMask};
use geofm_core::sampler::read_sample;

use crate::config::RunConfig;
use crate::manifest::require_artifact;

use super::Paths;

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.sampled_tiles(), "sample")?;
    require_artifact(&paths.tiles_dir(), "synth")?;

    let codes = read_sample(paths.sampled_tiles())?;
    let policy = FilterPolicy {
        window: (cfg.filter.window, cfg.filter.window),
        bad_fraction_threshold: cfg.filter.bad_fraction_threshold,
        timesteps_required: cfg.filter.timesteps_required,
        ..FilterPolicy::default()
    };

    // independent per tile, merged deterministically afterwards
    let per_tile: Result<Vec<Vec<ChipIndexEntry>>, anyhow::Error> = codes
        .par_iter()
        .map(|code| {
            let masks = load_masks(&paths.tiles_dir().join(code))?;
            Ok(filter_tile(&masks, &policy)?)
        })
        .collect();
    let mut entries: Vec<ChipIndexEntry> = per_tile?.into_iter().flatten().collect();
    entries.sort_by(|a, b| {
        (&a.tile_code, a.y, a.x, a.timestamps[0]).cmp(&(&b.tile_code, b.y, b.x, b.timestamps[0]))
    });
    log::info!("{} index entries from {} tiles", entries.len(), codes.len());
    write_index(&entries, paths.index_jsonl())?;
    Ok(vec![paths.index_jsonl()])
}

pub fn load_masks(tile_dir: &Path) -> anyhow::Result<Vec<QualityMask>> {
    let mut mask_files: Vec<PathBuf> = std::fs::read_dir(tile_dir)
        .map_err(|e| anyhow::anyhow!("tile dir {}: {e}", tile_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("mask_") && n.ends_with(".gfmc"))
        })
        .collect();
    mask_files.sort();
    if mask_files.is_empty() {
        anyhow::bail!("no quality masks under {}", tile_dir.display());
    }
    mask_files.iter().map(|p| Ok(read_mask(p)?)).collect()
}
