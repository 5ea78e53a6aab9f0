//! 3D sine-cosine positional encoding.
//!
//! The 1-D sin-cos encoding is generated per axis and the segments are
//! concatenated `[time | height | width]`. The embedding dim splits as
//! `D/4` for time and `3D/8` each for height and width (`D` divisible by
//! 16 keeps every segment even). Deterministic, never learned.

use crate::nn::tensor::Tensor;
use crate::nn::Scalar;

use super::MaeError;

/// Segment widths `(d_t, d_h, d_w)` for an embedding dim.
pub fn segment_split(dim: usize) -> Result<(usize, usize, usize), MaeError> {
    if dim == 0 || dim % 16 != 0 {
        return Err(MaeError::Config(format!(
            "positional encoding dim {dim} must be a positive multiple of 16"
        )));
    }
    let d_t = dim / 4;
    let rest = dim - d_t;
    Ok((d_t, rest / 2, rest / 2))
}

/// Encoding for the full `(gt, gh, gw)` token grid, in (t, h, w) token
/// order with w fastest; output `[N, dim]`.
pub fn posenc_3d<S: Scalar>(
    grid: (usize, usize, usize),
    dim: usize,
) -> Result<Tensor<S>, MaeError> {
    let (gt, gh, gw) = grid;
    let (d_t, d_h, d_w) = segment_split(dim)?;
    let n = gt * gh * gw;
    let mut out = Vec::with_capacity(n * dim);
    for t in 0..gt {
        let seg_t = encode_1d(t, d_t);
        for h in 0..gh {
            let seg_h = encode_1d(h, d_h);
            for w in 0..gw {
                let seg_w = encode_1d(w, d_w);
                out.extend(seg_t.iter().map(|&v| S::from_f64(v)));
                out.extend(seg_h.iter().map(|&v| S::from_f64(v)));
                out.extend(seg_w.iter().map(|&v| S::from_f64(v)));
            }
        }
    }
    Ok(Tensor::from_vec(&[n, dim], out).expect("posenc shape"))
}

/// Interleaved sin/cos pairs, frequency base 10000.
fn encode_1d(pos: usize, dim: usize) -> Vec<f64> {
    let mut seg = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * omega;
        seg[2 * i] = angle.sin();
        seg[2 * i + 1] = angle.cos();
    }
    seg
}
