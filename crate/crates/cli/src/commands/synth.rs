//! `synth`: generate the synthetic tile corpus plus its climate grid.

use std::collections::BTreeSet;
use std::path::PathBuf;

use geofm_core::raster::{generate_synthetic_tile, write_chip, write_mask, RasterChip};
use geofm_core::sampler::{ClimateCell, ClimateGrid};
use geofm_core::store::write_per_band_files;
use geofm_core::util::derive_seed;

use crate::config::RunConfig;

use super::{salt, Paths};

pub fn run(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    let tiles_dir = paths.tiles_dir();
    std::fs::create_dir_all(&tiles_dir)?;

    let mut cells = Vec::with_capacity(cfg.synth.tiles);
    let mut seen = BTreeSet::new();
    for i in 0..cfg.synth.tiles {
        // regenerate on the rare tile-code collision
        let mut attempt = 0u64;
        let (chip, masks) = loop {
            let seed = derive_seed(
                derive_seed(cfg.seed, salt::SYNTH),
                i as u64 + attempt * 7919,
            );
            let (chip, masks) = generate_synthetic_tile(
                seed,
                cfg.synth.size,
                cfg.synth.timesteps,
                cfg.synth.cloud_fraction,
            )?;
            if seen.insert(chip.origin.tile.tile_code.clone()) {
                break (chip, masks);
            }
            attempt += 1;
        };

        let code = chip.origin.tile.tile_code.clone();
        let dir = tiles_dir.join(&code);
        std::fs::create_dir_all(&dir)?;
        write_chip(&chip, dir.join("chip.gfmc"))?;
        for mask in &masks {
            write_mask(mask, dir.join(format!("mask_{}.gfmc", mask.timestamp.format("%Y-%m-%d"))))?;
        }
        if cfg.synth.per_band_files {
            write_per_band_files(&chip, &tiles_dir)?;
        }
        cells.push(climate_cell(&chip));
        log::debug!("tile {code} written ({i})");
    }

    let grid = ClimateGrid::new(cells)?;
    grid.write_csv(paths.climate_csv())?;
    Ok(vec![tiles_dir, paths.climate_csv()])
}

/// Aggregate statistics standing in for external climate data: the mean of
/// band B05 as the temperature proxy and the 99th percentile of band B07
/// as the precipitation proxy.
fn climate_cell(chip: &RasterChip) -> ClimateCell {
    let plane = chip.h * chip.w;
    let mean_band = 3.min(chip.c - 1);
    let p99_band = 5.min(chip.c - 1);

    let mut sum = 0.0f64;
    for t in 0..chip.t {
        let base = (t * chip.c + mean_band) * plane;
        for i in 0..plane {
            sum += f64::from(chip.data.get(base + i));
        }
    }
    let mean_value = sum / (chip.t * plane) as f64;

    let mut values: Vec<f32> = Vec::with_capacity(chip.t * plane);
    for t in 0..chip.t {
        let base = (t * chip.c + p99_band) * plane;
        for i in 0..plane {
            values.push(chip.data.get(base + i));
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p99_value = f64::from(values[(values.len() as f64 * 0.99) as usize]);

    ClimateCell { tile: chip.origin.tile.clone(), mean_value, p99_value }
}
