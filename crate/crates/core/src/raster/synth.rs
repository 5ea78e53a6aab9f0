//! Synthetic tile generator.
//!
//! Stands in for real surface-reflectance tiles at desk scale: smooth
//! multi-octave value noise with cross-band correlation, a per-timestep
//! brightness drift, and cloud ellipses painted into the quality masks
//! (core = cloud, surrounding ring = adjacent). Pixel data stays clean
//! under the clouds so imputation targets remain valid; the masks alone
//! mark the occluded regions.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChipData, ChipOrigin, QualityCode, QualityMask, RasterChip, RasterError, TileId};
use crate::util::derive_seed;

/// Per-band reflectance baseline and swing, roughly mimicking vegetation
/// signatures in scaled-reflectance units.
const BAND_OFFSET: [f64; 6] = [300.0, 500.0, 600.0, 2400.0, 1800.0, 900.0];
const BAND_GAIN: [f64; 6] = [900.0, 1200.0, 1600.0, 2600.0, 2400.0, 1800.0];

const REFLECTANCE_MAX: f64 = 10000.0;
const NODATA: f32 = 65535.0;

/// Generates one synthetic tile: a `(t, 6, size, size)` u16 chip and one
/// quality mask per timestep. Pure function of its arguments.
pub fn generate_synthetic_tile(
    seed: u64,
    size: usize,
    timesteps: usize,
    cloud_fraction: f64,
) -> Result<(RasterChip, Vec<QualityMask>), RasterError> {
    if size < 32 {
        return Err(RasterError::Argument(format!("size {size} < 32")));
    }
    if timesteps < 1 {
        return Err(RasterError::Argument("timesteps must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cloud_fraction) {
        return Err(RasterError::Argument(format!(
            "cloud_fraction {cloud_fraction} outside [0,1]"
        )));
    }

    let bands = BAND_OFFSET.len();
    let tile = tile_identity(seed);

    let base = fractal_noise(derive_seed(seed, 1), size);
    let band_fields: Vec<Vec<f64>> =
        (0..bands).map(|b| fractal_noise(derive_seed(seed, 2 + b as u64), size)).collect();
    let drift_field = fractal_noise(derive_seed(seed, 100), size);

    let start = start_date(seed);
    let timestamps: Vec<NaiveDate> =
        (0..timesteps).map(|i| start + Days::new(16 * i as u64)).collect();

    let mut data = vec![0u16; timesteps * bands * size * size];
    for (t, _) in timestamps.iter().enumerate() {
        // seasonal brightness swing plus a slowly moving additive field
        let season = 1.0 + 0.06 * (t as f64 * std::f64::consts::TAU / 23.0).sin();
        let drift_amp = 150.0 * (t as f64 / timesteps.max(1) as f64);
        for b in 0..bands {
            let plane = (t * bands + b) * size * size;
            for i in 0..size * size {
                let landscape = 0.65 * base[i] + 0.35 * band_fields[b][i];
                let mut v = (BAND_OFFSET[b] + BAND_GAIN[b] * landscape) * season
                    + drift_amp * (drift_field[i] - 0.5);
                v = v.clamp(0.0, REFLECTANCE_MAX);
                data[plane + i] = v.round() as u16;
            }
        }
    }

    let origin = ChipOrigin { tile, x: 0, y: 0 };
    let masks: Vec<QualityMask> = (0..timesteps)
        .map(|t| {
            let codes =
                cloud_codes(derive_seed(seed, 1000 + t as u64), size, cloud_fraction);
            QualityMask::new((size, size), codes, origin.clone(), timestamps[t])
        })
        .collect::<Result<_, _>>()?;

    let chip = RasterChip::new(
        (timesteps, bands, size, size),
        super::DEFAULT_BANDS.iter().map(|s| s.to_string()).collect(),
        timestamps,
        origin,
        NODATA,
        ChipData::U16(data),
    )?;
    Ok((chip, masks))
}

fn tile_identity(seed: u64) -> TileId {
    let h = derive_seed(seed, 0);
    let zone = (h % 60) as u8 + 1;
    // latitude bands C..X skipping I and O, as in MGRS
    const LAT: &[u8] = b"CDEFGHJKLMNPQRSTUVWX";
    let lat = LAT[(h >> 8) as usize % LAT.len()] as char;
    let code = format!("{:02}{}{:05}", zone, lat, (h >> 16) % 100000);
    TileId::new(zone, lat, code).expect("generated identity is valid")
}

fn start_date(seed: u64) -> NaiveDate {
    let day = (derive_seed(seed, 7) % 200) as u64;
    NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + Days::new(day)
}

/// Multi-octave value noise in [0, 1]: bilinear interpolation of random
/// lattice values, four octaves with halving amplitude.
fn fractal_noise(seed: u64, size: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; size * size];
    let mut amp = 1.0;
    let mut total = 0.0;
    for octave in 0..4u64 {
        let cells = 4usize << octave;
        let lattice = random_lattice(derive_seed(seed, octave), cells + 1);
        let scale = cells as f64 / size as f64;
        for y in 0..size {
            let fy = y as f64 * scale;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            for x in 0..size {
                let fx = x as f64 * scale;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let row = cells + 1;
                let v00 = lattice[y0 * row + x0];
                let v01 = lattice[y0 * row + x0 + 1];
                let v10 = lattice[(y0 + 1) * row + x0];
                let v11 = lattice[(y0 + 1) * row + x0 + 1];
                let sx = smoothstep(tx);
                let sy = smoothstep(ty);
                let v = lerp(lerp(v00, v01, sx), lerp(v10, v11, sx), sy);
                out[y * size + x] += amp * v;
            }
        }
        total += amp;
        amp *= 0.5;
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

fn random_lattice(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * n).map(|_| rng.gen::<f64>()).collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Paints cloud ellipses (code 1) with adjacent rings (code 3) until the
/// non-clear fraction reaches the target. Overshoot is bounded by the last
/// ellipse, whose area shrinks with the remaining need.
fn cloud_codes(seed: u64, size: usize, cloud_fraction: f64) -> Vec<u8> {
    let mut codes = vec![QualityCode::Clear as u8; size * size];
    let target = (cloud_fraction * (size * size) as f64).round() as usize;
    if target == 0 {
        return codes;
    }
    if cloud_fraction >= 1.0 {
        codes.fill(QualityCode::Cloud as u8);
        return codes;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut painted = 0usize;
    let mut iters = 0usize;
    while painted < target && iters < 10_000 {
        iters += 1;
        let remaining = target - painted;
        // total footprint (core + ring) aimed below the remaining need
        let total_area = (remaining as f64 * 0.9).clamp(12.0, (size * size) as f64 * 0.03);
        // ring at 1.25x the core axes scales the footprint by ~1.5625
        let core_area = total_area / 1.5625;
        let aspect = rng.gen_range(0.5..2.0);
        let a = (core_area * aspect / std::f64::consts::PI).sqrt().max(1.0);
        let b = (core_area / (aspect * std::f64::consts::PI)).sqrt().max(1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        painted += paint_ellipse(&mut codes, size, cx, cy, a, b, theta);
    }
    if painted < target {
        // pathological saturation: fill deterministically, clears first
        for c in codes.iter_mut() {
            if painted >= target {
                break;
            }
            if *c == QualityCode::Clear as u8 {
                *c = QualityCode::Cloud as u8;
                painted += 1;
            }
        }
    }
    codes
}

/// Returns the number of previously-clear pixels converted to non-clear.
fn paint_ellipse(
    codes: &mut [u8],
    size: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
) -> usize {
    let (sin_t, cos_t) = theta.sin_cos();
    let ring = 1.25;
    let reach = (a.max(b) * ring).ceil() as isize + 1;
    let (icx, icy) = (cx.round() as isize, cy.round() as isize);
    let mut converted = 0;
    for y in (icy - reach).max(0)..=(icy + reach).min(size as isize - 1) {
        for x in (icx - reach).max(0)..=(icx + reach).min(size as isize - 1) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let r2 = u * u + v * v;
            let idx = y as usize * size + x as usize;
            if r2 <= 1.0 {
                if codes[idx] == QualityCode::Clear as u8 {
                    converted += 1;
                }
                codes[idx] = QualityCode::Cloud as u8;
            } else if r2 <= ring * ring && codes[idx] == QualityCode::Clear as u8 {
                codes[idx] = QualityCode::Adjacent as u8;
                converted += 1;
            }
        }
    }
    converted
}
