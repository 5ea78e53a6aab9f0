//! Structural similarity (Wang et al. parameters: 11x11 Gaussian window,
//! sigma 1.5, K1 = 0.01, K2 = 0.03). The per-pixel index is averaged over
//! positions where the window fits entirely inside both images.

use super::MetricsError;

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; `None` derives it from the joint min/max of the two
    /// images, which keeps `ssim(a, b) == ssim(b, a)` exactly.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// Mean SSIM between two single-band images of shape `(h, w)`.
pub fn ssim(
    a: &[f32],
    b: &[f32],
    (h, w): (usize, usize),
    params: &SsimParams,
) -> Result<f64, MetricsError> {
    if a.len() != h * w || b.len() != h * w {
        return Err(MetricsError::Shape(format!(
            "buffers {}/{} do not match {h}x{w}",
            a.len(),
            b.len()
        )));
    }
    let win = params.window;
    if win == 0 || win % 2 == 0 {
        return Err(MetricsError::Argument(format!("window {win} must be odd and positive")));
    }
    if h < win || w < win {
        return Err(MetricsError::Argument(format!(
            "image {w}x{h} smaller than the {win}x{win} window"
        )));
    }
    let range = match params.data_range {
        Some(r) => {
            if r <= 0.0 {
                return Err(MetricsError::Argument(format!("data_range {r} must be positive")));
            }
            r
        }
        None => joint_range(a, b)?,
    };
    let c1 = (params.k1 * range) * (params.k1 * range);
    let c2 = (params.k2 * range) * (params.k2 * range);
    let kernel = gaussian_kernel(win, params.sigma);
    let half = win / 2;

    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
            let (mut aa, mut bb, mut ab) = (0.0f64, 0.0f64, 0.0f64);
            for ky in 0..win {
                let y = cy + ky - half;
                for kx in 0..win {
                    let x = cx + kx - half;
                    let wgt = kernel[ky * win + kx];
                    let va = f64::from(a[y * w + x]);
                    let vb = f64::from(b[y * w + x]);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * (va * vb);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let idx = ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += idx;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over per-band SSIM for `(c, h, w)` images.
pub fn ssim_multiband(
    a: &[f32],
    b: &[f32],
    (c, h, w): (usize, usize, usize),
    params: &SsimParams,
) -> Result<f64, MetricsError> {
    if c == 0 {
        return Err(MetricsError::Argument("zero bands".into()));
    }
    if a.len() != c * h * w || b.len() != c * h * w {
        return Err(MetricsError::Shape(format!(
            "buffers {}/{} do not match {c}x{h}x{w}",
            a.len(),
            b.len()
        )));
    }
    let plane = h * w;
    let mut sum = 0.0;
    for band in 0..c {
        sum += ssim(
            &a[band * plane..(band + 1) * plane],
            &b[band * plane..(band + 1) * plane],
            (h, w),
            params,
        )?;
    }
    Ok(sum / c as f64)
}

fn joint_range(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter().chain(b) {
        let v = f64::from(v);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range.is_finite() && range > 0.0) {
        // constant identical images still deserve a defined result
        return Ok(1.0);
    }
    Ok(range)
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let half = (win / 2) as f64;
    let mut k = vec![0.0f64; win * win];
    let mut sum = 0.0;
    for y in 0..win {
        for x in 0..win {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * win + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let img = random_image(1, 32 * 32, 0.0, 100.0);
        let got = ssim(&img, &img, (32, 32), &SsimParams::default()).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn negated_zero_mean_image_scores_negative() {
        // zero-mean checkerboard: window-local means stay near zero, so the
        // sign comes from the (negative) structure term
        let img: Vec<f32> = (0..32 * 32)
            .map(|i| if (i / 32 + i % 32) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let neg: Vec<f32> = img.iter().map(|v| -v).collect();
        let got = ssim(&img, &neg, (32, 32), &SsimParams::default()).unwrap();
        assert!(got < 0.0, "anticorrelated structure must score negative, got {got}");
    }

    #[test]
    fn matches_direct_formula_oracle() {
        // independent re-evaluation with explicit loops and no shared code
        let a = random_image(3, 32 * 32, 0.0, 255.0);
        let b = random_image(4, 32 * 32, 0.0, 255.0);
        let p = SsimParams { data_range: Some(255.0), ..SsimParams::default() };
        let got = ssim(&a, &b, (32, 32), &p).unwrap();

        let sigma = 1.5f64;
        let mut kern = [[0.0f64; 11]; 11];
        let mut ksum = 0.0;
        for (y, row) in kern.iter_mut().enumerate() {
            for (x, cell) in row.iter_mut().enumerate() {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                *cell = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                ksum += *cell;
            }
        }
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut acc = 0.0;
        let mut cnt = 0;
        for cy in 5..27usize {
            for cx in 5..27usize {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..11 {
                    for kx in 0..11 {
                        let wgt = kern[ky][kx] / ksum;
                        let va = f64::from(a[(cy + ky - 5) * 32 + cx + kx - 5]);
                        let vb = f64::from(b[(cy + ky - 5) * 32 + cx + kx - 5]);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * (va * vb);
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                cnt += 1;
            }
        }
        let want = acc / f64::from(cnt);
        assert!((got - want).abs() < 1e-9, "ssim {got} vs oracle {want}");
    }

    #[test]
    fn symmetric_exactly() {
        let a = random_image(5, 24 * 24, 0.0, 50.0);
        let b = random_image(6, 24 * 24, 10.0, 90.0);
        let p = SsimParams::default();
        assert_eq!(
            ssim(&a, &b, (24, 24), &p).unwrap(),
            ssim(&b, &a, (24, 24), &p).unwrap()
        );
    }

    #[test]
    fn bounded_in_unit_interval_for_random_pairs() {
        for seed in 0..10 {
            let a = random_image(seed, 16 * 16, 0.0, 10.0);
            let b = random_image(seed + 100, 16 * 16, 0.0, 10.0);
            let got = ssim(&a, &b, (16, 16), &SsimParams::default()).unwrap();
            assert!((-1.0..=1.0).contains(&got), "ssim {got} out of [-1,1]");
        }
    }

    #[test]
    fn noise_monotonically_degrades_similarity() {
        let base = random_image(7, 32 * 32, 0.0, 100.0);
        let sigmas = [0.0f32, 2.0, 5.0, 10.0, 20.0, 40.0];
        let mut means = Vec::new();
        for (si, &s) in sigmas.iter().enumerate() {
            let mut sum = 0.0;
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed * 31 + si as u64);
                let noisy: Vec<f32> = base
                    .iter()
                    .map(|&v| {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        v + s * z as f32
                    })
                    .collect();
                let p = SsimParams { data_range: Some(100.0), ..SsimParams::default() };
                sum += ssim(&base, &noisy, (32, 32), &p).unwrap();
            }
            means.push(sum / 20.0);
        }
        for pair in means.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "mean SSIM must not increase with noise: {means:?}"
            );
        }
    }

    #[test]
    fn small_image_is_rejected() {
        let img = vec![0.0f32; 8 * 8];
        assert!(matches!(
            ssim(&img, &img, (8, 8), &SsimParams::default()),
            Err(MetricsError::Argument(_))
        ));
    }
}
