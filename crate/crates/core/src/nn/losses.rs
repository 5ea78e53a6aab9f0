//! Loss heads: masked reconstruction losses, weighted cross entropy and
//! soft dice.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{NnError, Scalar};

/// MSE averaged over masked tokens only. `pred` and `target` are
/// `[B, N, P]`; `masked_idx[b]` lists the masked token positions of batch
/// element `b` (all lists the same length).
pub fn masked_mse<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    masked_idx: &[Vec<usize>],
) -> Result<NodeId, NnError> {
    if masked_idx.iter().all(|m| m.is_empty()) {
        return Err(NnError::Degenerate("masked_mse with an empty mask".into()));
    }
    let p = g.gather_tokens(pred, masked_idx)?;
    let t = g.gather_tokens(target, masked_idx)?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Root-mean-squared error over masked tokens.
pub fn masked_rmse<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    masked_idx: &[Vec<usize>],
) -> Result<NodeId, NnError> {
    let mse = masked_mse(g, pred, target, masked_idx)?;
    Ok(g.sqrt(mse))
}

/// Mean absolute error over masked tokens.
pub fn masked_mae<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    masked_idx: &[Vec<usize>],
) -> Result<NodeId, NnError> {
    if masked_idx.iter().all(|m| m.is_empty()) {
        return Err(NnError::Degenerate("masked_mae with an empty mask".into()));
    }
    let p = g.gather_tokens(pred, masked_idx)?;
    let t = g.gather_tokens(target, masked_idx)?;
    let d = g.sub(p, t)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Normalizes class weights to mean one.
pub fn normalize_class_weights(weights: &[f64]) -> Vec<f64> {
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    if mean <= 0.0 {
        return vec![1.0; weights.len()];
    }
    weights.iter().map(|w| w / mean).collect()
}

/// Inverse-frequency class weights (normalized to mean one) from a label
/// map sample; classes absent from the sample get weight one before
/// normalization.
pub fn inverse_frequency_weights(labels: &[u8], k: usize, ignore_label: u8) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for &l in labels {
        if l == ignore_label {
            continue;
        }
        if (l as usize) < k {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![1.0; k];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { total as f64 / (k as f64 * c as f64) })
        .collect();
    normalize_class_weights(&raw)
}

fn flatten_logits<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &[u8],
) -> Result<(NodeId, usize, usize), NnError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(NnError::Shape(format!("expected logits [B,K,H,W], got {shape:?}")));
    }
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let rows = b * h * w;
    if labels.len() != rows {
        return Err(NnError::Shape(format!(
            "{} labels for {rows} pixels (logits {shape:?})",
            labels.len()
        )));
    }
    let nhwc = g.permute(logits, &[0, 2, 3, 1])?;
    let flat = g.reshape(nhwc, &[rows, k])?;
    Ok((flat, rows, k))
}

/// Pixel-wise weighted cross entropy with an ignore label. Class weights
/// are normalized to mean one; the loss is the weighted NLL sum divided by
/// the sum of applied weights.
pub fn weighted_cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &[u8],
    class_weights: &[f64],
    ignore_label: u8,
) -> Result<NodeId, NnError> {
    let (flat, rows, k) = flatten_logits(g, logits, labels)?;
    if class_weights.len() != k {
        return Err(NnError::Shape(format!(
            "{} class weights for K={k}",
            class_weights.len()
        )));
    }
    let weights = normalize_class_weights(class_weights);
    let mut select = vec![0usize; rows];
    let mut row_w = vec![S::ZERO; rows];
    let mut weight_sum = 0.0f64;
    let mut any = false;
    for (r, &l) in labels.iter().enumerate() {
        if l == ignore_label {
            continue;
        }
        if l as usize >= k {
            return Err(NnError::Shape(format!(
                "label {l} at pixel {r} out of range for K={k}"
            )));
        }
        select[r] = l as usize;
        row_w[r] = S::from_f64(weights[l as usize]);
        weight_sum += weights[l as usize];
        any = true;
    }
    if !any {
        return Err(NnError::Degenerate("every pixel carries the ignore label".into()));
    }
    let logp = g.log_softmax(flat)?;
    let picked = g.select_index(logp, &select)?; // [rows]
    let w_node = g.constant(Tensor::from_vec(&[rows], row_w)?);
    let weighted = g.mul(picked, w_node)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / weight_sum))
}

/// Soft dice loss over class probabilities with smoothing term 1.0;
/// ignored pixels are excluded from every sum.
pub fn dice_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &[u8],
    ignore_label: u8,
) -> Result<NodeId, NnError> {
    let (flat, rows, k) = flatten_logits(g, logits, labels)?;
    let mut onehot = vec![S::ZERO; rows * k];
    let mut keep = vec![S::ZERO; rows * k];
    let mut any = false;
    for (r, &l) in labels.iter().enumerate() {
        if l == ignore_label {
            continue;
        }
        if l as usize >= k {
            return Err(NnError::Shape(format!(
                "label {l} at pixel {r} out of range for K={k}"
            )));
        }
        onehot[r * k + l as usize] = S::ONE;
        for q in 0..k {
            keep[r * k + q] = S::ONE;
        }
        any = true;
    }
    if !any {
        return Err(NnError::Degenerate("every pixel carries the ignore label".into()));
    }
    let probs = g.softmax(flat)?;
    let keep_node = g.constant(Tensor::from_vec(&[rows, k], keep)?);
    let onehot_node = g.constant(Tensor::from_vec(&[rows, k], onehot)?);
    let p = g.mul(probs, keep_node)?;
    let inter = {
        let pg = g.mul(p, onehot_node)?;
        g.sum_axis(pg, 0)?
    };
    let psum = g.sum_axis(p, 0)?;
    let gsum = g.sum_axis(onehot_node, 0)?;
    let smooth = 1.0;
    let num = {
        let two_i = g.scale(inter, 2.0);
        g.add_scalar(two_i, smooth)
    };
    let den = {
        let s = g.add(psum, gsum)?;
        g.add_scalar(s, smooth)
    };
    let dice = g.div(num, den)?; // [K]
    let mean = g.mean_all(dice);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}
