//! Central finite-difference gradient oracle.
//!
//! Validation-only: it never touches the analytic backward path it checks.
//! Runs in f64 with step `h = 1e-5`; the pass criterion is
//! `|analytic - numeric| <= atol + rtol * |numeric|` per element.

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
pub const FD_ATOL: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn numerical_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative violation across elements; `Ok` when every element sits
/// within `atol + rtol * |numeric|`.
pub fn assert_gradients_close(
    analytic: &[f64],
    numeric: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "gradient length mismatch: analytic {} vs numeric {}",
            analytic.len(),
            numeric.len()
        ));
    }
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = atol + rtol * n.abs();
        let err = (a - n).abs();
        if err > tol {
            let ratio = err / tol;
            if worst.map_or(true, |(_, _, _, w)| ratio > w) {
                worst = Some((i, a, n, ratio));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, a, n, ratio)) => Err(format!(
            "gradient mismatch at element {i}: analytic {a}, numeric {n} ({ratio:.1}x tolerance)"
        )),
    }
}

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

/// Checks analytic input gradients of `build` (any scalar-valued graph
/// function) against the finite-difference oracle, for every input.
pub fn check_inputs_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NnError>,
) -> Result<(), String> {
    // analytic pass
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids).map_err(|e| format!("forward failed: {e}"))?;
    if g.value(loss).numel() != 1 {
        return Err("gradcheck target must be scalar".into());
    }
    let grads = g.backward(loss).map_err(|e| format!("backward failed: {e}"))?;

    for (j, input) in inputs.iter().enumerate() {
        let analytic = match &grads[ids[j]] {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; input.numel()],
        };
        let flat = input.to_f64_vec();
        let shape = input.shape().to_vec();
        let mut eval = |x: &[f64]| -> f64 {
            let mut g2 = Graph::<f64>::new();
            let ids2: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(q, t)| {
                    if q == j {
                        g2.constant(Tensor::from_f64_slice(&shape, x).expect("probe shape"))
                    } else {
                        g2.constant(t.clone())
                    }
                })
                .collect();
            let out = build(&mut g2, &ids2).expect("probe forward");
            g2.value(out).item().expect("scalar")
        };
        let numeric = numerical_grad(&mut eval, &flat, FD_STEP);
        assert_gradients_close(&analytic, &numeric, FD_RTOL, FD_ATOL)
            .map_err(|msg| format!("input {j}: {msg}"))?;
    }
    Ok(())
}
