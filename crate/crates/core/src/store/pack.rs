//! Packing index entries into a store.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::quality::ChipIndexEntry;
use crate::raster::{read_chip, BandStats, ChipData, RasterChip};

use super::{payload_bytes, StoreError, StoreManifest, ZarrayMeta};

/// Resolves a tile code to its source chip.
pub trait ChipSource {
    fn resolve(&self, tile_code: &str) -> Result<Arc<RasterChip>, StoreError>;
}

/// Tiles laid out as `<root>/<tile_code>/chip.gfmc`. Caches the most
/// recently used tile, which covers the common case of index entries
/// grouped by tile.
pub struct DirChipSource {
    root: std::path::PathBuf,
    cache: std::sync::Mutex<Option<(String, Arc<RasterChip>)>>,
}

impl DirChipSource {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self { root: root.as_ref().to_path_buf(), cache: std::sync::Mutex::new(None) }
    }
}

impl ChipSource for DirChipSource {
    fn resolve(&self, tile_code: &str) -> Result<Arc<RasterChip>, StoreError> {
        {
            let cache = self.cache.lock().unwrap();
            if let Some((code, chip)) = cache.as_ref() {
                if code == tile_code {
                    return Ok(chip.clone());
                }
            }
        }
        let path = self.root.join(tile_code).join("chip.gfmc");
        let chip = Arc::new(read_chip(&path).map_err(|e| StoreError::MissingSource {
            tile: tile_code.to_string(),
            x: 0,
            y: 0,
            msg: format!("{}: {e}", path.display()),
        })?);
        *self.cache.lock().unwrap() = Some((tile_code.to_string(), chip.clone()));
        Ok(chip)
    }
}

/// In-memory source keyed by tile code.
#[derive(Default)]
pub struct MemChipSource {
    pub chips: BTreeMap<String, Arc<RasterChip>>,
}

impl MemChipSource {
    pub fn insert(&mut self, chip: RasterChip) {
        self.chips.insert(chip.origin.tile.tile_code.clone(), Arc::new(chip));
    }
}

impl ChipSource for MemChipSource {
    fn resolve(&self, tile_code: &str) -> Result<Arc<RasterChip>, StoreError> {
        self.chips.get(tile_code).cloned().ok_or_else(|| StoreError::MissingSource {
            tile: tile_code.to_string(),
            x: 0,
            y: 0,
            msg: "not present in source".into(),
        })
    }
}

/// Cuts every index entry out of its source tile and writes the chunked
/// store at `out_dir`.
///
/// Samples land in index order, `chunk_samples` per chunk file. The pack is
/// atomic: everything is staged in a temp directory next to `out_dir` and
/// renamed into place, so a crash leaves either the previous store or none.
pub fn pack(
    entries: &[ChipIndexEntry],
    source: &dyn ChipSource,
    stats: Option<&BandStats>,
    out_dir: impl AsRef<Path>,
    chunk_samples: usize,
) -> Result<StoreManifest, StoreError> {
    if chunk_samples < 1 {
        return Err(StoreError::Argument("chunk_samples must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();

    // establish uniform sample geometry from the first entry
    let mut sample_shape = (0usize, 0usize, 0usize, 0usize);
    let mut dtype = String::from("<u2");
    let mut band_names: Vec<String> = Vec::new();
    let mut nodata = 0f32;
    let mut tiles = BTreeMap::new();

    let tmp = out_dir.with_extension(format!("tmp.{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;

    let mut checksums = Vec::with_capacity(entries.len());
    let mut chunk_buf: Vec<u8> = Vec::new();
    let mut chunk_idx = 0usize;
    let mut sample_bytes_len = 0usize;

    let flush_chunk = |buf: &mut Vec<u8>, idx: usize, pad_to: usize| -> Result<(), StoreError> {
        // zarr v2 edge chunks are stored full-size, padded with the fill value
        buf.resize(pad_to, 0);
        let mut f = File::create(tmp.join(format!("{idx}.0.0.0.0")))?;
        f.write_all(buf)?;
        f.flush()?;
        buf.clear();
        Ok(())
    };

    for (i, entry) in entries.iter().enumerate() {
        let tile = source.resolve(&entry.tile_code).map_err(|e| match e {
            StoreError::MissingSource { msg, .. } => StoreError::MissingSource {
                tile: entry.tile_code.clone(),
                x: entry.x,
                y: entry.y,
                msg,
            },
            other => other,
        })?;
        let (wx, wy) = (entry.window.0 as usize, entry.window.1 as usize);
        let sample = tile
            .cut_window(entry.x, entry.y, wx, wy, &entry.timestamps)
            .map_err(|e| StoreError::Shape(format!("entry {i} (tile {}): {e}", entry.tile_code)))?;

        let shape = (sample.t, sample.c, sample.h, sample.w);
        let this_dtype = match sample.data {
            ChipData::U16(_) => "<u2",
            ChipData::F32(_) => "<f4",
        };
        if i == 0 {
            sample_shape = shape;
            dtype = this_dtype.to_string();
            band_names = sample.band_names.clone();
            nodata = sample.nodata;
            sample_bytes_len = sample.numel()
                * match sample.data {
                    ChipData::U16(_) => 2,
                    ChipData::F32(_) => 4,
                };
        } else if shape != sample_shape || this_dtype != dtype {
            return Err(StoreError::Shape(format!(
                "entry {i} sample shape {shape:?}/{this_dtype} differs from {sample_shape:?}/{dtype}"
            )));
        }
        tiles.entry(entry.tile_code.clone()).or_insert_with(|| tile.origin.tile.clone());

        let bytes = payload_bytes(&sample.data);
        checksums.push(crc32fast::hash(&bytes));
        chunk_buf.extend_from_slice(&bytes);
        if (i + 1) % chunk_samples == 0 {
            flush_chunk(&mut chunk_buf, chunk_idx, chunk_samples * sample_bytes_len)?;
            chunk_idx += 1;
        }
    }
    if !chunk_buf.is_empty() {
        flush_chunk(&mut chunk_buf, chunk_idx, chunk_samples * sample_bytes_len)?;
    }

    let (t, c, h, w) = sample_shape;
    let zarray = ZarrayMeta {
        zarr_format: 2,
        shape: vec![entries.len(), t, c, h, w],
        chunks: vec![chunk_samples, t, c, h, w],
        dtype: dtype.clone(),
        order: "C".into(),
        compressor: None,
        filters: None,
        fill_value: 0.0,
    };
    let manifest = StoreManifest {
        sample_count: entries.len(),
        sample_shape,
        dtype,
        chunk_samples,
        provenance: entries.to_vec(),
        tiles,
        band_stats: stats.cloned(),
        band_names,
        nodata,
        checksums,
    };
    write_json(&tmp.join(".zarray"), &zarray)?;
    write_json(&tmp.join("manifest.json"), &manifest)?;

    // swap into place
    if out_dir.exists() {
        std::fs::remove_dir_all(out_dir)?;
    }
    std::fs::rename(&tmp, out_dir)?;
    Ok(manifest)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| StoreError::Format(format!("serialize {}: {e}", path.display())))?;
    let mut f = File::create(path)?;
    f.write_all(body.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
