//! `sample`: stratified sampling of the tile corpus.

use std::path::PathBuf;

use geofm_core::sampler::{assign_groups, stratified_sample, write_sample, ClimateGrid};
use geofm_core::util::derive_seed;

use crate::config::RunConfig;
use crate::manifest::require_artifact;

use super::{salt, Paths};

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    require_artifact(&paths.climate_csv(), "synth")?;

    let grid = ClimateGrid::read_csv(paths.climate_csv())?;
    let assignment = assign_groups(&grid, cfg.sampler.g1, cfg.sampler.g2)?;
    let nonempty = assignment.nonempty_groups().len();
    log::info!(
        "{} cells into {nonempty} non-empty groups (of up to {})",
        grid.cells.len(),
        assignment.group_count
    );
    let tiles = stratified_sample(
        &grid,
        &assignment,
        cfg.sampler.budget,
        derive_seed(cfg.seed, salt::SAMPLE),
    )?;
    write_sample(&tiles, paths.sampled_tiles())?;
    log::info!("sampled {} tiles", tiles.len());
    Ok(vec![paths.sampled_tiles()])
}
