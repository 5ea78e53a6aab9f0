//! Per-file baseline loader, used to measure what the chunk store saves.
//!
//! Mirrors the naive layout where every (date, band) pair of a tile lives
//! in its own raster file: building one training sample opens `T * C`
//! files, so a batch of 128 three-date six-band samples opens 2304.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::quality::ChipIndexEntry;
use crate::raster::{read_chip, write_chip, ChipData, RasterChip};

use super::StoreError;

/// Splits a multi-date multi-band tile into single-band single-date files
/// under `<root>/<tile_code>/bands/<date>_<band>.gfmc`.
pub fn write_per_band_files(chip: &RasterChip, root: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = root.as_ref().join(&chip.origin.tile.tile_code).join("bands");
    std::fs::create_dir_all(&dir)?;
    let plane = chip.h * chip.w;
    for (t, date) in chip.timestamps.iter().enumerate() {
        for (c, band) in chip.band_names.iter().enumerate() {
            let base = (t * chip.c + c) * plane;
            let data = match &chip.data {
                ChipData::U16(v) => ChipData::U16(v[base..base + plane].to_vec()),
                ChipData::F32(v) => ChipData::F32(v[base..base + plane].to_vec()),
            };
            let single = RasterChip::new(
                (1, 1, chip.h, chip.w),
                vec![band.clone()],
                vec![*date],
                chip.origin.clone(),
                chip.nodata,
                data,
            )
            .map_err(|e| StoreError::Format(e.to_string()))?;
            let name = format!("{}_{band}.gfmc", date.format("%Y-%m-%d"));
            write_chip(&single, dir.join(name)).map_err(|e| StoreError::Format(e.to_string()))?;
        }
    }
    Ok(())
}

/// Loads samples by opening one file per (date, band), counting every open.
pub struct PerBandLoader {
    root: PathBuf,
    band_names: Vec<String>,
    opens: AtomicU64,
}

impl PerBandLoader {
    pub fn new(root: impl AsRef<Path>, band_names: Vec<String>) -> Self {
        Self { root: root.as_ref().to_path_buf(), band_names, opens: AtomicU64::new(0) }
    }

    pub fn file_opens(&self) -> u64 {
        self.opens.load(Ordering::Relaxed)
    }

    /// Assembles one `(T, C, wy, wx)` sample in C-order, f32.
    pub fn load_sample(&self, entry: &ChipIndexEntry) -> Result<Vec<f32>, StoreError> {
        let (wx, wy) = (entry.window.0 as usize, entry.window.1 as usize);
        let mut out = Vec::with_capacity(entry.timestamps.len() * self.band_names.len() * wy * wx);
        for date in &entry.timestamps {
            for band in &self.band_names {
                let path = self
                    .root
                    .join(&entry.tile_code)
                    .join("bands")
                    .join(format!("{}_{band}.gfmc", date.format("%Y-%m-%d")));
                let chip = read_chip(&path).map_err(|e| StoreError::MissingSource {
                    tile: entry.tile_code.clone(),
                    x: entry.x,
                    y: entry.y,
                    msg: format!("{}: {e}", path.display()),
                })?;
                self.opens.fetch_add(1, Ordering::Relaxed);
                let window = chip
                    .cut_window(entry.x, entry.y, wx, wy, &chip.timestamps.clone())
                    .map_err(|e| StoreError::Shape(e.to_string()))?;
                out.extend(window.data.to_f32_vec());
            }
        }
        Ok(out)
    }

    /// Loads a whole batch sample by sample; open count grows by
    /// `batch * T * C`.
    pub fn load_batch(&self, entries: &[ChipIndexEntry]) -> Result<Vec<Vec<f32>>, StoreError> {
        entries.iter().map(|e| self.load_sample(e)).collect()
    }
}
