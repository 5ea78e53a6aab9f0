//! Chunked sample store.
//!
//! Good-quality sub-regions are packed into a Zarr v2 directory: one
//! 5-D array of shape `(N, T, C, H, W)` chunked only along the sample
//! axis, raw/uncompressed, C-order, little-endian. A `manifest.json`
//! alongside the array metadata carries per-sample provenance, the band
//! stats used downstream and per-sample CRC32 checksums. Training reads
//! whole samples, so one chunk holds `chunk_samples` whole samples and a
//! batch touches few file handles.

mod baseline;
mod loader;
mod pack;

pub use baseline::{write_per_band_files, PerBandLoader};
pub use loader::{epoch_permutation, Batch, BatchIter, LoaderConfig};
pub use pack::{pack, ChipSource, DirChipSource, MemChipSource};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quality::ChipIndexEntry;
use crate::raster::{BandStats, ChipData, ChipOrigin, RasterChip, TileId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing source for entry (tile {tile}, x {x}, y {y}): {msg}")]
    MissingSource { tile: String, x: u32, y: u32, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sample index {index} out of range (sample_count {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("store corrupted: {0}")]
    Corruption(String),
    #[error("store format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Zarr v2 array metadata, serialized as `.zarray`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZarrayMeta {
    pub zarr_format: u32,
    pub shape: Vec<usize>,
    pub chunks: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub compressor: Option<serde_json::Value>,
    pub filters: Option<serde_json::Value>,
    pub fill_value: f64,
}

/// Store-level metadata: sample geometry, chunk layout, provenance and
/// integrity checksums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub sample_count: usize,
    /// `(T, C, H, W)` of every sample.
    pub sample_shape: (usize, usize, usize, usize),
    /// Zarr dtype string, `<u2` or `<f4`.
    pub dtype: String,
    /// Samples per chunk along axis 0.
    pub chunk_samples: usize,
    /// One index entry per sample, in sample order.
    pub provenance: Vec<ChipIndexEntry>,
    /// Tile identity lookup for the provenance entries.
    pub tiles: BTreeMap<String, TileId>,
    /// Band statistics computed at pack time, used for standardization.
    pub band_stats: Option<BandStats>,
    pub band_names: Vec<String>,
    pub nodata: f32,
    /// CRC32 (IEEE) of each sample's stored little-endian bytes.
    pub checksums: Vec<u32>,
}

impl StoreManifest {
    pub fn chunk_count(&self) -> usize {
        self.sample_count.div_ceil(self.chunk_samples)
    }

    pub fn sample_numel(&self) -> usize {
        let (t, c, h, w) = self.sample_shape;
        t * c * h * w
    }

    pub fn bytes_per_value(&self) -> usize {
        match self.dtype.as_str() {
            "<u2" => 2,
            "<f4" => 4,
            _ => 0,
        }
    }
}

/// Read handle over a packed store. Immutable after pack; safe to share
/// across reader threads.
pub struct ZarrStore {
    dir: PathBuf,
    pub manifest: StoreManifest,
    pub zarray: ZarrayMeta,
    opens: AtomicU64,
}

impl ZarrStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Arc<Self>, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let zarray_raw = std::fs::read_to_string(dir.join(".zarray"))
            .map_err(|e| StoreError::Format(format!("missing .zarray: {e}")))?;
        let zarray: ZarrayMeta = serde_json::from_str(&zarray_raw)
            .map_err(|e| StoreError::Format(format!("bad .zarray: {e}")))?;
        let manifest_raw = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| StoreError::Format(format!("missing manifest.json: {e}")))?;
        let manifest: StoreManifest = serde_json::from_str(&manifest_raw)
            .map_err(|e| StoreError::Format(format!("bad manifest.json: {e}")))?;

        if zarray.zarr_format != 2 || zarray.order != "C" {
            return Err(StoreError::Format("expected zarr v2, C order".into()));
        }
        let (t, c, h, w) = manifest.sample_shape;
        if zarray.shape != vec![manifest.sample_count, t, c, h, w] {
            return Err(StoreError::Format(format!(
                "array shape {:?} does not match manifest {:?}",
                zarray.shape,
                (manifest.sample_count, t, c, h, w)
            )));
        }
        if zarray.dtype != manifest.dtype || manifest.bytes_per_value() == 0 {
            return Err(StoreError::Format(format!("unsupported dtype {}", zarray.dtype)));
        }
        if manifest.provenance.len() != manifest.sample_count
            || manifest.checksums.len() != manifest.sample_count
        {
            return Err(StoreError::Format(
                "provenance/checksum length does not match sample_count".into(),
            ));
        }
        Ok(Arc::new(Self { dir, manifest, zarray, opens: AtomicU64::new(0) }))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Count of chunk-file open events since the handle was created.
    pub fn file_opens(&self) -> u64 {
        self.opens.load(Ordering::Relaxed)
    }

    pub fn chunk_path(&self, chunk: usize) -> PathBuf {
        self.dir.join(format!("{chunk}.0.0.0.0"))
    }

    fn sample_bytes(&self) -> usize {
        self.manifest.sample_numel() * self.manifest.bytes_per_value()
    }

    /// Raw stored bytes of sample `i`; opens at most one chunk file.
    pub fn read_sample_bytes(&self, i: usize) -> Result<Vec<u8>, StoreError> {
        let n = self.manifest.sample_count;
        if i >= n {
            return Err(StoreError::IndexOutOfRange { index: i, count: n });
        }
        let k = self.manifest.chunk_samples;
        let (chunk, offset) = (i / k, i % k);
        let mut f = File::open(self.chunk_path(chunk))?;
        self.opens.fetch_add(1, Ordering::Relaxed);
        let sb = self.sample_bytes();
        f.seek(SeekFrom::Start((offset * sb) as u64))?;
        let mut buf = vec![0u8; sb];
        f.read_exact(&mut buf).map_err(|e| {
            StoreError::Corruption(format!("chunk {chunk} truncated reading sample {i}: {e}"))
        })?;
        let crc = crc32fast::hash(&buf);
        if crc != self.manifest.checksums[i] {
            return Err(StoreError::Corruption(format!(
                "sample {i} checksum mismatch: stored {:#010x}, computed {crc:#010x}",
                self.manifest.checksums[i]
            )));
        }
        Ok(buf)
    }

    /// Reads sample `i` as a chip with its provenance metadata attached.
    pub fn read_sample(&self, i: usize) -> Result<RasterChip, StoreError> {
        let bytes = self.read_sample_bytes(i)?;
        let data = decode_values(&bytes, &self.manifest.dtype)?;
        let entry = &self.manifest.provenance[i];
        let tile = self
            .manifest
            .tiles
            .get(&entry.tile_code)
            .cloned()
            .ok_or_else(|| {
                StoreError::Format(format!("tile {} missing from manifest", entry.tile_code))
            })?;
        let (t, c, h, w) = self.manifest.sample_shape;
        RasterChip::new(
            (t, c, h, w),
            self.manifest.band_names.clone(),
            entry.timestamps.clone(),
            ChipOrigin { tile, x: entry.x, y: entry.y },
            self.manifest.nodata,
            data,
        )
        .map_err(|e| StoreError::Format(e.to_string()))
    }

    /// Decodes one whole chunk to f32 sample rows, verifying per-sample
    /// checksums. The last chunk may hold fewer than `chunk_samples`.
    pub fn read_chunk_f32(&self, chunk: usize) -> Result<Vec<Vec<f32>>, StoreError> {
        let k = self.manifest.chunk_samples;
        let n = self.manifest.sample_count;
        let first = chunk * k;
        if first >= n {
            return Err(StoreError::IndexOutOfRange { index: first, count: n });
        }
        let present = k.min(n - first);
        let sb = self.sample_bytes();
        let mut f = File::open(self.chunk_path(chunk))?;
        self.opens.fetch_add(1, Ordering::Relaxed);
        let mut buf = vec![0u8; sb * present];
        f.read_exact(&mut buf)
            .map_err(|e| StoreError::Corruption(format!("chunk {chunk} truncated: {e}")))?;
        let mut out = Vec::with_capacity(present);
        for s in 0..present {
            let slice = &buf[s * sb..(s + 1) * sb];
            let crc = crc32fast::hash(slice);
            if crc != self.manifest.checksums[first + s] {
                return Err(StoreError::Corruption(format!(
                    "sample {} checksum mismatch in chunk {chunk}",
                    first + s
                )));
            }
            out.push(decode_values_f32(slice, &self.manifest.dtype)?);
        }
        Ok(out)
    }
}

fn decode_values(bytes: &[u8], dtype: &str) -> Result<ChipData, StoreError> {
    match dtype {
        "<u2" => Ok(ChipData::U16(
            bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
        )),
        "<f4" => Ok(ChipData::F32(
            bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        )),
        other => Err(StoreError::Format(format!("unsupported dtype {other}"))),
    }
}

fn decode_values_f32(bytes: &[u8], dtype: &str) -> Result<Vec<f32>, StoreError> {
    Ok(match decode_values(bytes, dtype)? {
        ChipData::U16(v) => v.into_iter().map(f32::from).collect(),
        ChipData::F32(v) => v,
    })
}

/// Stored little-endian bytes of a chip payload, as packed into chunks.
pub(crate) fn payload_bytes(data: &ChipData) -> Vec<u8> {
    match data {
        ChipData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ChipData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::{filter_tile, FilterPolicy};
    use crate::raster::{generate_synthetic_tile, QualityCode};
    use chrono::NaiveDate;

    /// Synthetic tile + the all-window index over it.
    fn tile_and_entries(seed: u64, size: usize, t: usize, win: usize) -> (RasterChip, Vec<ChipIndexEntry>) {
        let (chip, masks) = generate_synthetic_tile(seed, size, t, 0.0).unwrap();
        let policy = FilterPolicy {
            window: (win, win),
            bad_fraction_threshold: 0.05,
            timesteps_required: 3,
            ..FilterPolicy::default()
        };
        let entries = filter_tile(&masks, &policy).unwrap();
        (chip, entries)
    }

    fn mem_source(chips: Vec<RasterChip>) -> MemChipSource {
        let mut src = MemChipSource::default();
        for c in chips {
            src.insert(c);
        }
        src
    }

    #[test]
    fn ten_entries_chunk_four_gives_three_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(5, 128, 4, 32);
        let entries = &entries[..10];
        let src = mem_source(vec![chip]);
        let m = pack(entries, &src, None, dir.path().join("store"), 4).unwrap();
        assert_eq!(m.sample_count, 10);
        assert_eq!(m.chunk_count(), 3);
        for i in 0..3 {
            assert!(dir.path().join("store").join(format!("{i}.0.0.0.0")).exists());
        }
        assert!(!dir.path().join("store").join("3.0.0.0.0").exists());
    }

    #[test]
    fn samples_equal_direct_window_cuts() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(6, 96, 4, 32);
        let src = mem_source(vec![chip.clone()]);
        pack(&entries, &src, None, dir.path().join("store"), 4).unwrap();
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        for (i, e) in entries.iter().enumerate() {
            let got = store.read_sample(i).unwrap();
            let want = chip
                .cut_window(e.x, e.y, e.window.0 as usize, e.window.1 as usize, &e.timestamps)
                .unwrap();
            assert_eq!(got.data, want.data, "sample {i}");
            assert_eq!(got.timestamps, want.timestamps);
            assert_eq!(got.origin, want.origin);
        }
    }

    #[test]
    fn empty_index_packs_to_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let src = MemChipSource::default();
        let m = pack(&[], &src, None, dir.path().join("store"), 8).unwrap();
        assert_eq!(m.sample_count, 0);
        assert_eq!(m.chunk_count(), 0);
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        assert_eq!(store.manifest.sample_count, 0);
    }

    #[test]
    fn read_twice_identical_and_out_of_range_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(7, 96, 3, 32);
        let src = mem_source(vec![chip]);
        let m = pack(&entries, &src, None, dir.path().join("store"), 4).unwrap();
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        let a = store.read_sample(0).unwrap();
        let b = store.read_sample(0).unwrap();
        assert_eq!(a, b);
        match store.read_sample(m.sample_count) {
            Err(StoreError::IndexOutOfRange { index, count }) => {
                assert_eq!(index, m.sample_count);
                assert_eq!(count, m.sample_count);
            }
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_chunk_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(8, 96, 3, 32);
        let src = mem_source(vec![chip]);
        pack(&entries, &src, None, dir.path().join("store"), 4).unwrap();
        let chunk0 = dir.path().join("store").join("0.0.0.0.0");
        let mut bytes = std::fs::read(&chunk0).unwrap();
        bytes[17] ^= 0xFF;
        std::fs::write(&chunk0, bytes).unwrap();
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        assert!(matches!(store.read_sample(0), Err(StoreError::Corruption(_))));
    }

    #[test]
    fn missing_tile_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let entry = ChipIndexEntry {
            tile_code: "nowhere".into(),
            timestamps: vec![NaiveDate::from_ymd_opt(2022, 1, 1).unwrap()],
            x: 3,
            y: 9,
            window: (8, 8),
        };
        let src = MemChipSource::default();
        match pack(&[entry], &src, None, dir.path().join("store"), 2) {
            Err(StoreError::MissingSource { tile, x, y, .. }) => {
                assert_eq!(tile, "nowhere");
                assert_eq!((x, y), (3, 9));
            }
            other => panic!("expected missing-source error, got {other:?}"),
        }
    }

    #[test]
    fn repack_overwrites_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("store");
        let (chip, entries) = tile_and_entries(9, 96, 3, 32);
        let src = mem_source(vec![chip]);
        pack(&entries, &src, None, &out, 4).unwrap();
        let first = std::fs::read(out.join("manifest.json")).unwrap();
        pack(&entries, &src, None, &out, 4).unwrap();
        let second = std::fs::read(out.join("manifest.json")).unwrap();
        assert_eq!(first, second, "re-pack must be byte-identical");
    }

    /// A source that fails after a set number of resolutions, simulating a
    /// crash mid-pack.
    struct FailingSource {
        inner: MemChipSource,
        allow: std::sync::atomic::AtomicUsize,
    }
    impl ChipSource for FailingSource {
        fn resolve(&self, tile_code: &str) -> Result<Arc<RasterChip>, StoreError> {
            if self.allow.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                return Err(StoreError::MissingSource {
                    tile: tile_code.into(),
                    x: 0,
                    y: 0,
                    msg: "simulated crash".into(),
                });
            }
            self.inner.resolve(tile_code)
        }
    }

    #[test]
    fn failed_pack_leaves_old_store_intact() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("store");
        let (chip, entries) = tile_and_entries(10, 96, 3, 32);
        let src = mem_source(vec![chip.clone()]);
        pack(&entries[..4], &src, None, &out, 2).unwrap();
        let before = std::fs::read(out.join("manifest.json")).unwrap();

        let failing = FailingSource {
            inner: mem_source(vec![chip]),
            allow: std::sync::atomic::AtomicUsize::new(3),
        };
        assert!(pack(&entries, &failing, None, &out, 2).is_err());
        let after = std::fs::read(out.join("manifest.json")).unwrap();
        assert_eq!(before, after, "old store must survive a failed pack");
        ZarrStore::open(&out).unwrap();
    }

    fn packed_store(dir: &std::path::Path, seed: u64) -> Arc<ZarrStore> {
        let (chip, entries) = tile_and_entries(seed, 128, 4, 32);
        let src = mem_source(vec![chip]);
        pack(&entries, &src, None, dir.join("store"), 8).unwrap();
        ZarrStore::open(dir.join("store")).unwrap()
    }

    #[test]
    fn worker_count_does_not_change_batches() {
        let dir = tempfile::tempdir().unwrap();
        let store = packed_store(dir.path(), 11);
        let take = |workers: usize| -> Vec<Batch> {
            let cfg = LoaderConfig { batch_size: 4, workers, prefetch: 2, shuffle_seed: 3 };
            BatchIter::new(store.clone(), cfg, 0)
                .unwrap()
                .map(|b| b.unwrap())
                .collect()
        };
        let solo = take(1);
        let four = take(4);
        assert_eq!(solo.len(), four.len());
        for (a, b) in solo.iter().zip(&four) {
            assert_eq!(a.sample_ids, b.sample_ids);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn batch_count_is_floor_of_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(12, 256, 4, 32);
        assert!(entries.len() >= 100);
        let src = mem_source(vec![chip]);
        pack(&entries[..100], &src, None, dir.path().join("store"), 8).unwrap();
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        let cfg = LoaderConfig { batch_size: 32, workers: 2, prefetch: 1, shuffle_seed: 0 };
        let it = BatchIter::new(store, cfg, 0).unwrap();
        assert_eq!(it.batches_per_epoch(), 3);
        assert_eq!(it.count(), 3);
    }

    #[test]
    fn epoch_touches_each_sample_at_most_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = packed_store(dir.path(), 13);
        let n = store.manifest.sample_count;
        let cfg = LoaderConfig { batch_size: 4, workers: 2, prefetch: 2, shuffle_seed: 5 };
        let mut seen = std::collections::HashSet::new();
        let mut total = 0usize;
        for batch in BatchIter::new(store.clone(), cfg, 1).unwrap() {
            for id in batch.unwrap().sample_ids {
                assert!(seen.insert(id), "sample {id} repeated");
                total += 1;
            }
        }
        assert!(n - total < 4, "all but < batch_size samples visited");
    }

    #[test]
    fn epoch_opens_each_chunk_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = packed_store(dir.path(), 14);
        let cfg = LoaderConfig { batch_size: 8, workers: 3, prefetch: 2, shuffle_seed: 9 };
        let before = store.file_opens();
        let it = BatchIter::new(store.clone(), cfg.clone(), 0).unwrap();
        let n_batches = it.batches_per_epoch();
        for b in it {
            b.unwrap();
        }
        let opens = store.file_opens() - before;
        let needed_chunks = store.manifest.chunk_count() as u64;
        assert!(
            opens <= needed_chunks,
            "epoch of {n_batches} batches opened {opens} chunk files, expected <= {needed_chunks}"
        );
    }

    #[test]
    fn different_epochs_shuffle_differently() {
        let dir = tempfile::tempdir().unwrap();
        let store = packed_store(dir.path(), 15);
        let p0 = epoch_permutation(&store.manifest, 1, 0);
        let p1 = epoch_permutation(&store.manifest, 1, 1);
        assert_ne!(p0, p1);
        assert_eq!(p0, epoch_permutation(&store.manifest, 1, 0));
    }

    #[test]
    fn store_deleted_mid_iteration_surfaces_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = packed_store(dir.path(), 16);
        let cfg = LoaderConfig { batch_size: 4, workers: 1, prefetch: 0, shuffle_seed: 0 };
        let mut it = BatchIter::new(store.clone(), cfg, 0).unwrap();
        it.next().unwrap().unwrap();
        std::fs::remove_dir_all(dir.path().join("store")).unwrap();
        // some batch further on must fail once the cached chunks run out
        let rest: Vec<_> = it.collect();
        assert!(rest.iter().any(|r| r.is_err()), "expected an I/O error after deletion");
    }

    #[test]
    fn baseline_loader_opens_t_times_c_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (chip, entries) = tile_and_entries(17, 96, 3, 32);
        write_per_band_files(&chip, dir.path()).unwrap();
        let loader = PerBandLoader::new(dir.path(), chip.band_names.clone());
        let batch = loader.load_batch(&entries[..4]).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(loader.file_opens(), (4 * 3 * 6) as u64);

        // values must agree with the packed store
        let src = mem_source(vec![chip]);
        pack(&entries[..4], &src, None, dir.path().join("store"), 2).unwrap();
        let store = ZarrStore::open(dir.path().join("store")).unwrap();
        for (i, base) in batch.iter().enumerate() {
            let chunked = store.read_sample(i).unwrap().data.to_f32_vec();
            assert_eq!(base, &chunked, "sample {i} differs between loaders");
        }
    }
}
