//! Streaming per-band statistics and standardization.
//!
//! A pixel position `(t, y, x)` is excluded when its quality code is not
//! clear, or when any band at that position equals the nodata sentinel.
//! All bands therefore share one pixel count.

use super::{BandStats, ChipData, QualityCode, QualityMask, RasterChip, RasterError};

/// Floor applied to the standard deviation during standardization.
pub const STD_EPS: f64 = 1e-6;

/// Single-pass Welford accumulator over per-band values.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(bands: usize) -> Self {
        Self { count: 0, mean: vec![0.0; bands], m2: vec![0.0; bands] }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Folds one chip (with optional per-timestep quality masks) into the
    /// accumulator.
    pub fn update(
        &mut self,
        chip: &RasterChip,
        quality: Option<&[QualityMask]>,
    ) -> Result<(), RasterError> {
        if chip.c != self.bands() {
            return Err(RasterError::Shape(format!(
                "chip has {} bands, accumulator {}",
                chip.c,
                self.bands()
            )));
        }
        if let Some(masks) = quality {
            if masks.len() != chip.t {
                return Err(RasterError::Shape(format!(
                    "{} masks for T={} chip",
                    masks.len(),
                    chip.t
                )));
            }
            for m in masks {
                if m.h != chip.h || m.w != chip.w {
                    return Err(RasterError::Shape(format!(
                        "mask {}x{} misaligned with chip {}x{}",
                        m.w, m.h, chip.w, chip.h
                    )));
                }
            }
        }
        let clear = QualityCode::Clear as u8;
        for t in 0..chip.t {
            for y in 0..chip.h {
                for x in 0..chip.w {
                    if let Some(masks) = quality {
                        if masks[t].code(y, x) != clear {
                            continue;
                        }
                    }
                    let excluded = (0..chip.c).any(|c| chip.value(t, c, y, x) == chip.nodata);
                    if excluded {
                        continue;
                    }
                    self.count += 1;
                    let n = self.count as f64;
                    for c in 0..chip.c {
                        let v = f64::from(chip.value(t, c, y, x));
                        let delta = v - self.mean[c];
                        self.mean[c] += delta / n;
                        self.m2[c] += delta * (v - self.mean[c]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Finishes the accumulator into population-variance band stats.
    pub fn finish(self) -> Result<BandStats, RasterError> {
        if self.count == 0 {
            return Err(RasterError::EmptyInput(
                "no valid pixels after nodata/quality exclusion".into(),
            ));
        }
        let n = self.count as f64;
        let std = self.m2.iter().map(|m2| (m2 / n).sqrt()).collect();
        Ok(BandStats { mean: self.mean, std, pixel_count: self.count })
    }
}

/// Computes per-band mean/std over a chip stream in one pass.
///
/// `quality` masks, when present, are aligned per timestep with each chip.
pub fn compute_band_stats<'a, I>(items: I) -> Result<BandStats, RasterError>
where
    I: IntoIterator<Item = (&'a RasterChip, Option<&'a [QualityMask]>)>,
{
    let mut iter = items.into_iter();
    let (first, first_masks) = iter
        .next()
        .ok_or_else(|| RasterError::EmptyInput("empty chip stream".into()))?;
    let mut acc = StatsAccumulator::new(first.c);
    acc.update(first, first_masks)?;
    for (chip, masks) in iter {
        acc.update(chip, masks)?;
    }
    acc.finish()
}

/// `(v - mean) / max(std, STD_EPS)` per band; output is an f32 chip.
pub fn standardize(chip: &RasterChip, stats: &BandStats) -> Result<RasterChip, RasterError> {
    if stats.band_count() != chip.c {
        return Err(RasterError::Shape(format!(
            "stats cover {} bands, chip has {}",
            stats.band_count(),
            chip.c
        )));
    }
    let mut out = vec![0f32; chip.numel()];
    let plane = chip.h * chip.w;
    for t in 0..chip.t {
        for c in 0..chip.c {
            let mean = stats.mean[c];
            let denom = stats.std[c].max(STD_EPS);
            let base = (t * chip.c + c) * plane;
            for i in 0..plane {
                let v = f64::from(chip.data.get(base + i));
                out[base + i] = ((v - mean) / denom) as f32;
            }
        }
    }
    Ok(RasterChip {
        data: ChipData::F32(out),
        band_names: chip.band_names.clone(),
        timestamps: chip.timestamps.clone(),
        origin: chip.origin.clone(),
        ..*chip
    })
}

/// Inverse of [`standardize`]: `v * max(std, STD_EPS) + mean`.
pub fn unstandardize(chip: &RasterChip, stats: &BandStats) -> Result<RasterChip, RasterError> {
    if stats.band_count() != chip.c {
        return Err(RasterError::Shape(format!(
            "stats cover {} bands, chip has {}",
            stats.band_count(),
            chip.c
        )));
    }
    let mut out = vec![0f32; chip.numel()];
    let plane = chip.h * chip.w;
    for t in 0..chip.t {
        for c in 0..chip.c {
            let mean = stats.mean[c];
            let scale = stats.std[c].max(STD_EPS);
            let base = (t * chip.c + c) * plane;
            for i in 0..plane {
                let v = f64::from(chip.data.get(base + i));
                out[base + i] = (v * scale + mean) as f32;
            }
        }
    }
    Ok(RasterChip {
        data: ChipData::F32(out),
        band_names: chip.band_names.clone(),
        timestamps: chip.timestamps.clone(),
        origin: chip.origin.clone(),
        ..*chip
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ChipOrigin, TileId};
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chip_from(values: Vec<u16>, c: usize, h: usize, w: usize) -> RasterChip {
        let t = values.len() / (c * h * w);
        RasterChip::new(
            (t, c, h, w),
            (0..c).map(|i| format!("B{:02}", i + 2)).collect(),
            (0..t)
                .map(|i| NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Days::new(i as u64))
                .collect(),
            ChipOrigin { tile: TileId::new(10, 'T', "10TEK000").unwrap(), x: 0, y: 0 },
            65535.0,
            ChipData::U16(values),
        )
        .unwrap()
    }

    #[test]
    fn two_pixel_band_population_stats() {
        let chip = chip_from(vec![2, 4], 1, 1, 2);
        let stats = compute_band_stats([(&chip, None)]).unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(stats.pixel_count, 2);
    }

    #[test]
    fn all_nodata_is_empty_input() {
        let chip = chip_from(vec![65535; 4], 1, 2, 2);
        assert!(matches!(
            compute_band_stats([(&chip, None)]),
            Err(RasterError::EmptyInput(_))
        ));
    }

    #[test]
    fn matches_two_pass_oracle_regardless_of_chunking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chips: Vec<RasterChip> = (0..10)
            .map(|_| {
                let vals: Vec<u16> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(0..10000)).collect();
                chip_from(vals, 3, 8, 8)
            })
            .collect();

        // two-pass oracle over the same inclusion rule
        let mut per_band: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for chip in &chips {
            for t in 0..chip.t {
                for y in 0..chip.h {
                    for x in 0..chip.w {
                        for c in 0..chip.c {
                            per_band[c].push(f64::from(chip.value(t, c, y, x)));
                        }
                    }
                }
            }
        }
        let oracle_mean: Vec<f64> =
            per_band.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let oracle_std: Vec<f64> = per_band
            .iter()
            .zip(&oracle_mean)
            .map(|(v, m)| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
            .collect();

        // streaming, two different chunkings of the same stream
        let all = compute_band_stats(chips.iter().map(|c| (c, None))).unwrap();
        let mut acc = StatsAccumulator::new(3);
        for chip in &chips[..4] {
            acc.update(chip, None).unwrap();
        }
        for chip in &chips[4..] {
            acc.update(chip, None).unwrap();
        }
        let split = acc.finish().unwrap();

        for c in 0..3 {
            for (got, want) in [(all.mean[c], oracle_mean[c]), (all.std[c], oracle_std[c])] {
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "band {c}: streaming {got} vs oracle {want}"
                );
            }
            assert_eq!(all.mean[c], split.mean[c]);
            assert_eq!(all.std[c], split.std[c]);
        }
    }

    #[test]
    fn quality_mask_excludes_pixels() {
        let chip = chip_from(vec![10, 20, 30, 1000], 1, 2, 2);
        let mut codes = vec![QualityCode::Clear as u8; 4];
        codes[3] = QualityCode::Cloud as u8; // drop the 1000
        let mask = QualityMask::new(
            (2, 2),
            codes,
            chip.origin.clone(),
            chip.timestamps[0],
        )
        .unwrap();
        let masks = vec![mask];
        let stats = compute_band_stats([(&chip, Some(masks.as_slice()))]).unwrap();
        assert_eq!(stats.pixel_count, 3);
        assert!((stats.mean[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn constant_band_standardizes_to_zero() {
        let chip = chip_from(vec![500; 16], 1, 4, 4);
        let stats = compute_band_stats([(&chip, None)]).unwrap();
        assert_eq!(stats.std[0], 0.0);
        let z = standardize(&chip, &stats).unwrap();
        match z.data {
            ChipData::F32(v) => assert!(v.iter().all(|&x| x == 0.0 && x.is_finite())),
            _ => panic!("expected f32 output"),
        }
    }

    #[test]
    fn standardize_then_invert_recovers_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<u16> = (0..2 * 2 * 6 * 6).map(|_| rng.gen_range(0..10000)).collect();
        let chip = chip_from(vals, 2, 6, 6);
        let stats = compute_band_stats([(&chip, None)]).unwrap();
        let z = standardize(&chip, &stats).unwrap();
        let back = unstandardize(&z, &stats).unwrap();
        for i in 0..chip.numel() {
            let orig = chip.data.get(i);
            let rec = back.data.get(i);
            assert!(
                (orig - rec).abs() <= 1e-5 * orig.abs().max(1.0),
                "pixel {i}: {orig} vs {rec}"
            );
        }
    }

    #[test]
    fn band_count_mismatch_is_shape_error() {
        let chip = chip_from(vec![1, 2, 3, 4], 1, 2, 2);
        let stats = BandStats { mean: vec![0.0; 2], std: vec![1.0; 2], pixel_count: 1 };
        assert!(matches!(standardize(&chip, &stats), Err(RasterError::Shape(_))));
    }
}
