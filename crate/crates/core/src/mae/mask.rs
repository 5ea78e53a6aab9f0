//! Mask plans: the explicit partition of tokens into masked and visible
//! sets, random for pretraining or derived from cloud masks for gap
//! filling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::raster::{QualityCode, QualityMask};

use super::MaeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOrigin {
    Random,
    QualityMask,
}

/// Disjoint, exhaustive partition of `0..total` into masked and visible
/// index sets (both sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub total: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub origin: MaskOrigin,
}

impl MaskPlan {
    pub fn new(
        total: usize,
        mut masked: Vec<usize>,
        origin: MaskOrigin,
    ) -> Result<Self, MaeError> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(MaeError::Shape(format!(
                "masked index {} out of range for {total} tokens",
                masked.last().unwrap()
            )));
        }
        let mut is_masked = vec![false; total];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..total).filter(|&i| !is_masked[i]).collect();
        Ok(Self { total, masked, visible, origin })
    }

    pub fn masked_count(&self) -> usize {
        self.masked.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.len()
    }
}

/// Uniform sample of exactly `round(ratio * n)` masked tokens.
pub fn make_mask_plan(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan, MaeError> {
    if n == 0 {
        return Err(MaeError::Config("mask plan over zero tokens".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaeError::Config(format!("mask ratio {ratio} outside [0,1]")));
    }
    let k = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    all.truncate(k);
    MaskPlan::new(n, all, MaskOrigin::Random)
}

/// Cloud-derived plan: a token in the target timestep is masked iff any
/// pixel of its `(ph, pw)` footprint carries a non-clear code; tokens of
/// every other timestep stay visible. Requires tubelet size 1 so tokens
/// align with single dates.
pub fn make_mask_plan_from_quality(
    grid: (usize, usize, usize),
    patch: (usize, usize),
    masks: &[QualityMask],
    target_t: usize,
) -> Result<MaskPlan, MaeError> {
    let (gt, gh, gw) = grid;
    let (ph, pw) = patch;
    if masks.len() != gt {
        return Err(MaeError::Shape(format!(
            "{} quality masks for a {gt}-timestep token grid (tubelet size must be 1)",
            masks.len()
        )));
    }
    if target_t >= gt {
        return Err(MaeError::Config(format!(
            "target timestep {target_t} out of range for T={gt}"
        )));
    }
    let mask = &masks[target_t];
    if mask.h < gh * ph || mask.w < gw * pw {
        return Err(MaeError::Shape(format!(
            "quality mask {}x{} smaller than token grid footprint {}x{}",
            mask.w,
            mask.h,
            gw * pw,
            gh * ph
        )));
    }
    let clear = QualityCode::Clear as u8;
    let mut masked = Vec::new();
    for h in 0..gh {
        for w in 0..gw {
            let mut bad = false;
            'scan: for dy in 0..ph {
                for dx in 0..pw {
                    if mask.code(h * ph + dy, w * pw + dx) != clear {
                        bad = true;
                        break 'scan;
                    }
                }
            }
            if bad {
                masked.push((target_t * gh + h) * gw + w);
            }
        }
    }
    if masked.is_empty() {
        return Err(MaeError::EmptyMask(
            "target timestep is fully clear, nothing to reconstruct".into(),
        ));
    }
    MaskPlan::new(gt * gh * gw, masked, MaskOrigin::QualityMask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ChipOrigin, TileId};
    use chrono::NaiveDate;

    fn mask_of(codes: Vec<u8>, h: usize, w: usize, day: u32) -> QualityMask {
        QualityMask::new(
            (h, w),
            codes,
            ChipOrigin { tile: TileId::new(10, 'T', "10TEK000").unwrap(), x: 0, y: 0 },
            NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
        )
        .unwrap()
    }

    #[test]
    fn paper_ratio_masks_441_of_588() {
        let plan = make_mask_plan(588, 0.75, 1).unwrap();
        assert_eq!(plan.masked_count(), 441);
        assert_eq!(plan.visible_count(), 147);
        // disjoint and exhaustive
        let mut union: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..588).collect::<Vec<_>>());
    }

    #[test]
    fn plan_is_deterministic_per_seed() {
        assert_eq!(make_mask_plan(100, 0.5, 7).unwrap(), make_mask_plan(100, 0.5, 7).unwrap());
        assert_ne!(make_mask_plan(100, 0.5, 7).unwrap(), make_mask_plan(100, 0.5, 8).unwrap());
    }

    #[test]
    fn exact_count_for_any_ratio() {
        for n in [1usize, 17, 96, 588] {
            for ratio in [0.1, 0.25, 0.5, 0.75, 0.9] {
                let plan = make_mask_plan(n, ratio, 3).unwrap();
                assert_eq!(plan.masked_count(), (ratio * n as f64).round() as usize);
            }
        }
    }

    #[test]
    fn all_clear_is_empty_mask_error() {
        let masks: Vec<QualityMask> =
            (0..3).map(|d| mask_of(vec![0u8; 64 * 64], 64, 64, d * 16)).collect();
        assert!(matches!(
            make_mask_plan_from_quality((3, 4, 4), (16, 16), &masks, 1),
            Err(MaeError::EmptyMask(_))
        ));
    }

    #[test]
    fn single_cloudy_pixel_masks_exactly_one_token() {
        let mut masks: Vec<QualityMask> =
            (0..3).map(|d| mask_of(vec![0u8; 64 * 64], 64, 64, d * 16)).collect();
        masks[1].codes[0] = QualityCode::Cloud as u8; // pixel (0,0) of middle date
        let plan = make_mask_plan_from_quality((3, 4, 4), (16, 16), &masks, 1).unwrap();
        // token (t=1, h=0, w=0) = 1*16 + 0*4 + 0
        assert_eq!(plan.masked, vec![16]);
        assert_eq!(plan.origin, MaskOrigin::QualityMask);
    }

    #[test]
    fn other_timesteps_stay_visible() {
        let mut masks: Vec<QualityMask> =
            (0..3).map(|d| mask_of(vec![0u8; 64 * 64], 64, 64, d * 16)).collect();
        for c in masks[1].codes.iter_mut() {
            *c = QualityCode::Cloud as u8;
        }
        let plan = make_mask_plan_from_quality((3, 4, 4), (16, 16), &masks, 1).unwrap();
        assert_eq!(plan.masked_count(), 16); // the whole middle timestep
        assert!(plan.masked.iter().all(|&m| (16..32).contains(&m)));
    }
}
