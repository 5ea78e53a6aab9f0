//! Core raster types: tiles, chips, quality masks and band statistics.
//!
//! A [`RasterChip`] is the universal sample unit of the pipeline: a
//! `(T, C, H, W)` block of reflectance values with band names, acquisition
//! dates and a geo origin. [`QualityMask`] carries per-pixel cloud/no-data
//! categories for one acquisition date of a tile.

mod chip_io;
mod preview;
mod stats;
mod synth;

pub use chip_io::{read_chip, read_mask, write_chip, write_mask};
pub use preview::write_rgb_png;
pub use stats::{compute_band_stats, standardize, unstandardize, StatsAccumulator, STD_EPS};
pub use synth::generate_synthetic_tile;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for raster types, chip I/O and band statistics.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid tile id: {0}")]
    InvalidTileId(String),
    #[error("invalid chip: {0}")]
    InvalidChip(String),
    #[error("chip format error: {0}")]
    Format(String),
    #[error("chip data corrupted: {0}")]
    Corruption(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default band set used throughout the pipeline.
pub const DEFAULT_BANDS: [&str; 6] = ["B02", "B03", "B04", "B05", "B06", "B07"];

/// Identity of a source tile: UTM zone, latitude band and an opaque code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub utm_zone: u8,
    pub lat_band: char,
    pub tile_code: String,
}

impl TileId {
    pub fn new(utm_zone: u8, lat_band: char, tile_code: impl Into<String>) -> Result<Self, RasterError> {
        let tile_code = tile_code.into();
        if !(1..=60).contains(&utm_zone) {
            return Err(RasterError::InvalidTileId(format!(
                "utm_zone {utm_zone} outside [1,60]"
            )));
        }
        if !lat_band.is_ascii_alphabetic() {
            return Err(RasterError::InvalidTileId(format!(
                "lat_band {lat_band:?} is not a letter"
            )));
        }
        if tile_code.is_empty() {
            return Err(RasterError::InvalidTileId("empty tile_code".into()));
        }
        Ok(Self { utm_zone, lat_band, tile_code })
    }
}

/// Where a chip was cut from: source tile plus top-left pixel offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipOrigin {
    pub tile: TileId,
    pub x: u32,
    pub y: u32,
}

/// Pixel payload of a chip. Reflectance tiles are `u16`; standardized or
/// reconstructed chips are `f32`.
#[derive(Debug, Clone, PartialEq)]
pub enum ChipData {
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl ChipData {
    pub fn len(&self) -> usize {
        match self {
            ChipData::U16(v) => v.len(),
            ChipData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value at a flat index, widened to `f32` (lossless for u16).
    pub fn get(&self, i: usize) -> f32 {
        match self {
            ChipData::U16(v) => f32::from(v[i]),
            ChipData::F32(v) => v[i],
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            ChipData::U16(v) => v.iter().map(|&x| f32::from(x)).collect(),
            ChipData::F32(v) => v.clone(),
        }
    }
}

/// A `(T, C, H, W)` standardized pixel block with geo/temporal metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterChip {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub band_names: Vec<String>,
    pub timestamps: Vec<NaiveDate>,
    pub origin: ChipOrigin,
    pub nodata: f32,
    pub data: ChipData,
}

impl RasterChip {
    pub fn new(
        (t, c, h, w): (usize, usize, usize, usize),
        band_names: Vec<String>,
        timestamps: Vec<NaiveDate>,
        origin: ChipOrigin,
        nodata: f32,
        data: ChipData,
    ) -> Result<Self, RasterError> {
        if t < 1 || c < 1 {
            return Err(RasterError::InvalidChip(format!("T={t}, C={c} must be >= 1")));
        }
        if band_names.len() != c {
            return Err(RasterError::InvalidChip(format!(
                "{} band names for C={c}",
                band_names.len()
            )));
        }
        if timestamps.len() != t {
            return Err(RasterError::InvalidChip(format!(
                "{} timestamps for T={t}",
                timestamps.len()
            )));
        }
        if !timestamps.windows(2).all(|p| p[0] < p[1]) {
            return Err(RasterError::InvalidChip(
                "timestamps not strictly increasing".into(),
            ));
        }
        if data.len() != t * c * h * w {
            return Err(RasterError::InvalidChip(format!(
                "payload length {} != T*C*H*W = {}",
                data.len(),
                t * c * h * w
            )));
        }
        Ok(Self { t, c, h, w, band_names, timestamps, origin, nodata, data })
    }

    pub fn numel(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    /// Flat index of pixel `(t, c, y, x)` in C-order.
    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn value(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data.get(self.index(t, c, y, x))
    }

    /// Cuts a `(timesteps, C, win_h, win_w)` sub-chip at top-left `(x, y)`,
    /// keeping only the timesteps whose dates appear in `dates`.
    pub fn cut_window(
        &self,
        x: u32,
        y: u32,
        win_w: usize,
        win_h: usize,
        dates: &[NaiveDate],
    ) -> Result<RasterChip, RasterError> {
        let (x, y) = (x as usize, y as usize);
        if x + win_w > self.w || y + win_h > self.h {
            return Err(RasterError::Shape(format!(
                "window {win_w}x{win_h} at ({x},{y}) exceeds chip {}x{}",
                self.w, self.h
            )));
        }
        let mut t_sel = Vec::with_capacity(dates.len());
        for d in dates {
            match self.timestamps.iter().position(|ts| ts == d) {
                Some(i) => t_sel.push(i),
                None => {
                    return Err(RasterError::Argument(format!(
                        "date {d} not present in chip timestamps"
                    )))
                }
            }
        }
        let mut out = match &self.data {
            ChipData::U16(_) => Vec::<u16>::with_capacity(t_sel.len() * self.c * win_h * win_w),
            ChipData::F32(_) => Vec::new(),
        };
        let mut out_f = Vec::<f32>::new();
        for &ti in &t_sel {
            for c in 0..self.c {
                for dy in 0..win_h {
                    let base = self.index(ti, c, y + dy, x);
                    match &self.data {
                        ChipData::U16(v) => out.extend_from_slice(&v[base..base + win_w]),
                        ChipData::F32(v) => out_f.extend_from_slice(&v[base..base + win_w]),
                    }
                }
            }
        }
        let data = match &self.data {
            ChipData::U16(_) => ChipData::U16(out),
            ChipData::F32(_) => ChipData::F32(out_f),
        };
        RasterChip::new(
            (t_sel.len(), self.c, win_h, win_w),
            self.band_names.clone(),
            dates.to_vec(),
            ChipOrigin {
                tile: self.origin.tile.clone(),
                x: self.origin.x + x as u32,
                y: self.origin.y + y as u32,
            },
            self.nodata,
            data,
        )
    }
}

/// FMask-style per-pixel quality categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum QualityCode {
    Clear = 0,
    Cloud = 1,
    CloudShadow = 2,
    Adjacent = 3,
    NoData = 255,
}

impl QualityCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Clear),
            1 => Some(Self::Cloud),
            2 => Some(Self::CloudShadow),
            3 => Some(Self::Adjacent),
            255 => Some(Self::NoData),
            _ => None,
        }
    }
}

/// Per-pixel quality categories for one acquisition date of a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMask {
    pub h: usize,
    pub w: usize,
    pub codes: Vec<u8>,
    pub origin: ChipOrigin,
    pub timestamp: NaiveDate,
}

impl QualityMask {
    pub fn new(
        (h, w): (usize, usize),
        codes: Vec<u8>,
        origin: ChipOrigin,
        timestamp: NaiveDate,
    ) -> Result<Self, RasterError> {
        if codes.len() != h * w {
            return Err(RasterError::InvalidChip(format!(
                "mask payload {} != H*W = {}",
                codes.len(),
                h * w
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| QualityCode::from_u8(c).is_none()) {
            return Err(RasterError::InvalidChip(format!("unknown quality code {bad}")));
        }
        Ok(Self { h, w, codes, origin, timestamp })
    }

    #[inline]
    pub fn code(&self, y: usize, x: usize) -> u8 {
        self.codes[y * self.w + x]
    }

    pub fn fraction_not_clear(&self) -> f64 {
        let bad = self.codes.iter().filter(|&&c| c != QualityCode::Clear as u8).count();
        bad as f64 / (self.h * self.w) as f64
    }
}

/// Per-band mean and standard deviation (population form) over the
/// non-excluded pixels of a chip stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pixel_count: u64,
}

impl BandStats {
    pub fn band_count(&self) -> usize {
        self.mean.len()
    }
}
