//! 8-bit RGB previews of chips (bands B04/B03/B02) for visual inspection.

use std::path::Path;

use super::{RasterChip, RasterError};

/// Reflectance value mapped to full brightness.
const PREVIEW_MAX: f32 = 3000.0;

/// Writes one timestep of a chip as a PNG, using B04/B03/B02 as RGB
/// (falling back to the first three bands when names are missing).
pub fn write_rgb_png(
    chip: &RasterChip,
    timestep: usize,
    path: impl AsRef<Path>,
) -> Result<(), RasterError> {
    if timestep >= chip.t {
        return Err(RasterError::Argument(format!(
            "timestep {timestep} out of range for T={}",
            chip.t
        )));
    }
    let band_index = |name: &str, fallback: usize| -> usize {
        chip.band_names.iter().position(|b| b == name).unwrap_or(fallback.min(chip.c - 1))
    };
    let rgb = [band_index("B04", 2), band_index("B03", 1), band_index("B02", 0)];
    let mut img = image::RgbImage::new(chip.w as u32, chip.h as u32);
    for y in 0..chip.h {
        for x in 0..chip.w {
            let mut px = [0u8; 3];
            for (i, &band) in rgb.iter().enumerate() {
                let v = chip.value(timestep, band, y, x);
                px[i] = ((v / PREVIEW_MAX).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path.as_ref())
        .map_err(|e| RasterError::Argument(format!("png encode: {e}")))?;
    Ok(())
}
