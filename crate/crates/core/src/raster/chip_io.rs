//! The on-disk chip container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    "GFMC"                     4 bytes
//! version  u16                        currently 1
//! dtype    u8                         0 = u16, 1 = f32, 2 = u8 (quality mask)
//! dims     T, C, H, W as u32
//! bands    u32 count, then per name u32 len + UTF-8 bytes
//! dates    u32 count, then per date u32 len + UTF-8 ISO-8601 (YYYY-MM-DD)
//! origin   u32 len + tile_code UTF-8, u8 utm_zone, u8 lat_band, u32 x, u32 y
//! nodata   f32
//! payload  T*C*H*W values, C-order
//! ```
//!
//! Quality masks reuse the container with dtype 2, `T=1`, `C=1`, a single
//! band name `FMASK` and the acquisition date as the only timestamp.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{ChipData, ChipOrigin, QualityMask, RasterChip, RasterError, TileId};

const MAGIC: &[u8; 4] = b"GFMC";
const VERSION: u16 = 1;

const DTYPE_U16: u8 = 0;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

/// Writes a chip to `path`; the round trip through [`read_chip`] is bit-exact.
pub fn write_chip(chip: &RasterChip, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let mut w = BufWriter::new(File::create(path)?);
    let dtype = match chip.data {
        ChipData::U16(_) => DTYPE_U16,
        ChipData::F32(_) => DTYPE_F32,
    };
    write_header(&mut w, dtype, chip)?;
    match &chip.data {
        ChipData::U16(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        ChipData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a chip written by [`write_chip`].
pub fn read_chip(path: impl AsRef<Path>) -> Result<RasterChip, RasterError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims, band_names, timestamps, origin, nodata) = read_header(&mut r)?;
    let numel = dims.0 * dims.1 * dims.2 * dims.3;
    let data = match dtype {
        DTYPE_U16 => {
            let raw = read_exact_payload(&mut r, numel * 2)?;
            ChipData::U16(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
        }
        DTYPE_F32 => {
            let raw = read_exact_payload(&mut r, numel * 4)?;
            ChipData::F32(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )
        }
        DTYPE_U8 => {
            return Err(RasterError::Format(
                "dtype 2 is a quality mask; use read_mask".into(),
            ))
        }
        other => return Err(RasterError::Format(format!("unknown dtype code {other}"))),
    };
    RasterChip::new(dims, band_names, timestamps, origin, nodata, data)
        .map_err(|e| RasterError::Format(e.to_string()))
}

/// Writes a quality mask using the chip container (dtype 2, C=1).
pub fn write_mask(mask: &QualityMask, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let mut w = BufWriter::new(File::create(path)?);
    let as_chip = RasterChip {
        t: 1,
        c: 1,
        h: mask.h,
        w: mask.w,
        band_names: vec!["FMASK".to_string()],
        timestamps: vec![mask.timestamp],
        origin: mask.origin.clone(),
        nodata: 255.0,
        data: ChipData::U16(Vec::new()), // header only; payload written below
    };
    write_header(&mut w, DTYPE_U8, &as_chip)?;
    w.write_all(&mask.codes)?;
    w.flush()?;
    Ok(())
}

/// Reads a quality mask written by [`write_mask`].
pub fn read_mask(path: impl AsRef<Path>) -> Result<QualityMask, RasterError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims, _bands, timestamps, origin, _nodata) = read_header(&mut r)?;
    if dtype != DTYPE_U8 {
        return Err(RasterError::Format(format!(
            "expected quality-mask dtype 2, found {dtype}"
        )));
    }
    let (t, c, h, w) = dims;
    if t != 1 || c != 1 {
        return Err(RasterError::Format(format!("quality mask must be T=1,C=1, got T={t},C={c}")));
    }
    let codes = read_exact_payload(&mut r, h * w)?;
    QualityMask::new((h, w), codes, origin, timestamps[0])
        .map_err(|e| RasterError::Format(e.to_string()))
}

fn write_header(w: &mut impl Write, dtype: u8, chip: &RasterChip) -> Result<(), RasterError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype])?;
    for d in [chip.t, chip.c, chip.h, chip.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_str_block(w, &chip.band_names)?;
    let dates: Vec<String> = chip.timestamps.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect();
    write_str_block(w, &dates)?;
    write_str(w, &chip.origin.tile.tile_code)?;
    w.write_all(&[chip.origin.tile.utm_zone])?;
    w.write_all(&[chip.origin.tile.lat_band as u8])?;
    w.write_all(&chip.origin.x.to_le_bytes())?;
    w.write_all(&chip.origin.y.to_le_bytes())?;
    w.write_all(&chip.nodata.to_le_bytes())?;
    Ok(())
}

type Header = (u8, (usize, usize, usize, usize), Vec<String>, Vec<NaiveDate>, ChipOrigin, f32);

fn read_header(r: &mut impl Read) -> Result<Header, RasterError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| RasterError::Format("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(RasterError::Format(format!("bad magic {magic:?}, expected \"GFMC\"")));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(RasterError::Format(format!("unsupported version {version}")));
    }
    let dtype = read_u8(r)?;
    let t = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let band_names = read_str_block(r)?;
    let date_strs = read_str_block(r)?;
    let mut timestamps = Vec::with_capacity(date_strs.len());
    for s in &date_strs {
        timestamps.push(
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|e| RasterError::Format(format!("bad timestamp {s:?}: {e}")))?,
        );
    }
    let tile_code = read_str(r)?;
    let utm_zone = read_u8(r)?;
    let lat_band = read_u8(r)? as char;
    let x = read_u32(r)?;
    let y = read_u32(r)?;
    let mut nodata_bytes = [0u8; 4];
    r.read_exact(&mut nodata_bytes)
        .map_err(|_| RasterError::Format("truncated header".into()))?;
    let nodata = f32::from_le_bytes(nodata_bytes);
    let tile = TileId::new(utm_zone, lat_band, tile_code)
        .map_err(|e| RasterError::Format(e.to_string()))?;
    Ok((dtype, (t, c, h, w), band_names, timestamps, ChipOrigin { tile, x, y }, nodata))
}

fn read_exact_payload(r: &mut impl Read, len: usize) -> Result<Vec<u8>, RasterError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| RasterError::Corruption(format!("payload truncated, expected {len} bytes")))?;
    // trailing garbage is corruption too
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(buf),
        Ok(_) => Err(RasterError::Corruption("trailing bytes after payload".into())),
        Err(e) => Err(e.into()),
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), RasterError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_str_block(w: &mut impl Write, items: &[impl AsRef<str>]) -> Result<(), RasterError> {
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for s in items {
        write_str(w, s.as_ref())?;
    }
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String, RasterError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(RasterError::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| RasterError::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|e| RasterError::Format(format!("invalid UTF-8: {e}")))
}

fn read_str_block(r: &mut impl Read) -> Result<Vec<String>, RasterError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(RasterError::Format(format!("implausible block count {n}")));
    }
    (0..n).map(|_| read_str(r)).collect()
}

fn read_u8(r: &mut impl Read) -> Result<u8, RasterError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| RasterError::Format("truncated header".into()))?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, RasterError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| RasterError::Format("truncated header".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, RasterError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| RasterError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::QualityCode;

    fn sample_chip(t: usize, c: usize, h: usize, w: usize) -> RasterChip {
        let tile = TileId::new(13, 'T', "13TDE042").unwrap();
        let data: Vec<u16> = (0..t * c * h * w).map(|i| (i % 9973) as u16).collect();
        RasterChip::new(
            (t, c, h, w),
            (0..c).map(|i| format!("B{:02}", i + 2)).collect(),
            (0..t)
                .map(|i| NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Days::new(16 * i as u64))
                .collect(),
            ChipOrigin { tile, x: 64, y: 128 },
            65535.0,
            ChipData::U16(data),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chip.gfmc");
        let chip = sample_chip(3, 6, 32, 32);
        write_chip(&chip, &path).unwrap();
        let back = read_chip(&path).unwrap();
        assert_eq!(chip, back);
    }

    #[test]
    fn tiny_chip_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.gfmc");
        let tile = TileId::new(1, 'C', "01CAA000").unwrap();
        let chip = RasterChip::new(
            (1, 1, 2, 2),
            vec!["B02".into()],
            vec![NaiveDate::from_ymd_opt(2022, 6, 1).unwrap()],
            ChipOrigin { tile, x: 0, y: 0 },
            65535.0,
            ChipData::U16(vec![0, 1, 2, 3]),
        )
        .unwrap();
        write_chip(&chip, &path).unwrap();
        let back = read_chip(&path).unwrap();
        assert_eq!(back.data, ChipData::U16(vec![0, 1, 2, 3]));
    }

    #[test]
    fn altered_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chip.gfmc");
        write_chip(&sample_chip(1, 2, 4, 4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match read_chip(&path) {
            Err(RasterError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chip.gfmc");
        write_chip(&sample_chip(1, 2, 4, 4), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_chip(&path), Err(RasterError::Corruption(_))));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.gfmc");
        let tile = TileId::new(33, 'U', "33UVP001").unwrap();
        let mut codes = vec![QualityCode::Clear as u8; 64];
        codes[10] = QualityCode::Cloud as u8;
        codes[11] = QualityCode::Adjacent as u8;
        codes[63] = QualityCode::NoData as u8;
        let mask = QualityMask::new(
            (8, 8),
            codes,
            ChipOrigin { tile, x: 0, y: 0 },
            NaiveDate::from_ymd_opt(2022, 3, 15).unwrap(),
        )
        .unwrap();
        write_mask(&mask, &path).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn f32_chip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.gfmc");
        let tile = TileId::new(7, 'K', "07KAB777").unwrap();
        let chip = RasterChip::new(
            (1, 1, 2, 2),
            vec!["B02".into()],
            vec![NaiveDate::from_ymd_opt(2022, 6, 1).unwrap()],
            ChipOrigin { tile, x: 3, y: 9 },
            -1.0,
            ChipData::F32(vec![0.5, -1.25, 3.75e-3, 1.0e6]),
        )
        .unwrap();
        write_chip(&chip, &path).unwrap();
        assert_eq!(read_chip(&path).unwrap(), chip);
    }
}
