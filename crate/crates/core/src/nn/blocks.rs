//! Layer composites: linear, layer norm, multi-head attention, MLP block,
//! pre-norm transformer block, tubelet patch embedding and stride-2
//! transposed convolution. Parameter initialization lives here too.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::optim::{GraphParams, ParamStore};
use super::tensor::Tensor;
use super::{NnError, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Truncated normal (resample outside two standard deviations), the usual
/// ViT initialization.
pub fn trunc_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            data.push(S::from_f64(z * std));
        }
    }
    Tensor::from_vec(shape, data).expect("trunc_normal shape")
}

pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), NnError> {
    store.insert(format!("{name}.weight"), trunc_normal(&[in_dim, out_dim], 0.02, rng))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]))
}

pub fn init_layer_norm<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    dim: usize,
) -> Result<(), NnError> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[dim], S::ONE))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))
}

pub fn init_transformer_block<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), NnError> {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim)?;
    for part in ["q", "k", "v", "proj"] {
        init_linear(store, &format!("{prefix}.attn.{part}"), dim, dim, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), dim, 4 * dim, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), 4 * dim, dim, rng)
}

/// `x @ W + b` with `x [.., in]`, `W [in, out]`, `b [out]`.
pub fn linear<S: Scalar>(
    g: &mut Graph<S>,
    p: &GraphParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    p: &GraphParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Full (unmasked) multi-head attention over `x [B, N, D]`.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &GraphParams,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId, NnError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(NnError::Shape(format!("attention expects [B,N,D], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(NnError::Config(format!("head count {heads} must divide dim {d}")));
    }
    let dh = d / heads;

    let split = |g: &mut Graph<S>, t: NodeId| -> Result<NodeId, NnError> {
        let r = g.reshape(t, &[b, n, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3]) // [B, H, N, Dh]
    };

    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;

    let kt = g.permute(kh, &[0, 1, 3, 2])?; // [B, H, Dh, N]
    let scores = g.matmul(qh, kt)?;
    let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scaled)?;
    let ctx = g.matmul(attn, vh)?; // [B, H, N, Dh]
    let merged = g.permute(ctx, &[0, 2, 1, 3])?;
    let flat = g.reshape(merged, &[b, n, d])?;
    linear(g, p, &format!("{prefix}.proj"), flat)
}

/// Two-layer MLP with GELU.
pub fn mlp_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &GraphParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NnError> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let a = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), a)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `y + mlp(ln2(y))`.
pub fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &GraphParams,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId, NnError> {
    let n1 = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, p, &format!("{prefix}.attn"), n1, heads)?;
    let y = g.add(x, a)?;
    let n2 = layer_norm(g, p, &format!("{prefix}.ln2"), y)?;
    let m = mlp_block(g, p, &format!("{prefix}.mlp"), n2)?;
    g.add(y, m)
}

/// Non-overlapping 3D convolution (stride = kernel): tubelet patch
/// embedding. Input `[B, T, C, H, W]`, weight `[C*kt*kh*kw, D]`, bias
/// `[D]`; output `[B, N, D]` over the `(T/kt, H/kh, W/kw)` token grid.
pub fn conv3d<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    kernel: (usize, usize, usize),
) -> Result<NodeId, NnError> {
    let tokens = g.patchify(x, kernel)?;
    let k = g.shape(tokens)[2];
    let wshape = g.shape(weight).to_vec();
    if wshape.len() != 2 || wshape[0] != k {
        return Err(NnError::Shape(format!(
            "conv3d weight {wshape:?} does not match patch length {k}"
        )));
    }
    let y = g.matmul(tokens, weight)?;
    g.add(y, bias)
}

/// Stride-2 transposed 2D convolution with a 2x2 kernel: doubles the
/// spatial dims. Input `[B, Cin, H, W]`, weight `[Cin, Cout*2*2]`
/// (PyTorch `ConvTranspose2d` layout flattened), bias `[Cout]`.
pub fn transpose_conv2d<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId, NnError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(NnError::Shape(format!(
            "transpose_conv2d expects [B,Cin,H,W], got {shape:?}"
        )));
    }
    let (b, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let wshape = g.shape(weight).to_vec();
    if wshape.len() != 2 || wshape[0] != cin || wshape[1] % 4 != 0 {
        return Err(NnError::Shape(format!(
            "transpose_conv2d weight {wshape:?} incompatible with Cin={cin} (needs [Cin, Cout*4])"
        )));
    }
    let cout = wshape[1] / 4;
    let bshape = g.shape(bias).to_vec();
    if bshape != [cout] {
        return Err(NnError::Shape(format!(
            "transpose_conv2d bias {bshape:?} must be [{cout}]"
        )));
    }

    // with stride = kernel every output pixel receives exactly one
    // contribution, so this is a per-pixel linear map plus a pixel shuffle
    let nhwc = g.permute(x, &[0, 2, 3, 1])?; // [B, H, W, Cin]
    let rows = g.reshape(nhwc, &[b, h * w, cin])?;
    let mixed = g.matmul(rows, weight)?; // [B, HW, Cout*4]
    // bias per output pixel: repeat the Cout bias across the 2x2 kernel
    let expanded = {
        let tokens = g.reshape(mixed, &[b, h * w, cout * 4])?;
        g.unpatchify(tokens, (b, 1, cout, 2 * h, 2 * w), (1, 2, 2))?
    };
    let maps = g.reshape(expanded, &[b, cout, 2 * h, 2 * w])?;
    // add bias over the channel axis: move channels last, add, move back
    let nhwc_out = g.permute(maps, &[0, 2, 3, 1])?;
    let biased = g.add(nhwc_out, bias)?;
    g.permute(biased, &[0, 3, 1, 2])
}

/// Deterministic RNG for parameter init.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
