//! Reverse-mode autodiff over a flat expression graph.
//!
//! Nodes are appended in forward order, so reverse insertion order is a
//! valid topological order for the backward sweep. Each op stores a
//! vector-Jacobian closure that receives the output gradient and a
//! per-parent "needed" mask, returning gradients only for parents that
//! require them.

use super::tensor::Tensor;
use super::{NnError, Scalar};

pub type NodeId = usize;

type VjpFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<NodeId>,
    vjp: Option<VjpFn<S>>,
    requires_grad: bool,
}

/// Expression graph for one forward/backward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in the forward pass only.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, vec![], None, false)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, vec![], None, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        parents: Vec<NodeId>,
        vjp: Option<VjpFn<S>>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node { value, parents, vjp, requires_grad });
        self.nodes.len() - 1
    }

    fn push_op(&mut self, value: Tensor<S>, parents: Vec<NodeId>, vjp: VjpFn<S>) -> NodeId {
        let requires = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, parents, Some(vjp), requires)
    }

    /// Backward sweep from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<S>>>, NnError> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(NnError::Shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), S::ONE));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let Some(vjp) = &self.nodes[id].vjp else { continue };
            let parents = &self.nodes[id].parents;
            let needed: Vec<bool> =
                parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = vjp(grads[id].as_ref().unwrap(), &needed);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (&p, g) in parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(grads)
    }

    // ---- elementwise and broadcast arithmetic ----

    fn check_broadcast(&self, a: NodeId, b: NodeId, op: &str) -> Result<(), NnError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(NnError::Shape(format!(
                "{op}: lhs {sa:?} vs rhs {sb:?} (rhs must match or be a trailing suffix)"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_broadcast(a, b, "add")?;
        let out = broadcast_zip(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let b_shape = self.shape(b).to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![
                needed[0].then(|| g.clone()),
                needed[1].then(|| reduce_to_suffix(g, &b_shape)),
            ]
        });
        Ok(self.push_op(out, vec![a, b], vjp))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_broadcast(a, b, "sub")?;
        let out = broadcast_zip(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let b_shape = self.shape(b).to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![
                needed[0].then(|| g.clone()),
                needed[1].then(|| {
                    let neg = g.map(|v| -v);
                    reduce_to_suffix(&neg, &b_shape)
                }),
            ]
        });
        Ok(self.push_op(out, vec![a, b], vjp))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_broadcast(a, b, "mul")?;
        let va = self.nodes[a].value.clone();
        let vb = self.nodes[b].value.clone();
        let out = broadcast_zip(&va, &vb, |x, y| x * y);
        let b_shape = vb.shape().to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![
                needed[0].then(|| broadcast_zip(g, &vb, |gv, bv| gv * bv)),
                needed[1].then(|| {
                    let prod = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect(),
                    )
                    .expect("same shape");
                    reduce_to_suffix(&prod, &b_shape)
                }),
            ]
        });
        Ok(self.push_op(out, vec![a, b], vjp))
    }

    /// Elementwise division, same-shape only.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "div: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.nodes[a].value.clone();
        let vb = self.nodes[b].value.clone();
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x / y).collect(),
        )
        .expect("same shape");
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![
                needed[0].then(|| {
                    Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv / bv).collect(),
                    )
                    .expect("same shape")
                }),
                needed[1].then(|| {
                    Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                            .collect(),
                    )
                    .expect("same shape")
                }),
            ]
        });
        Ok(self.push_op(out, vec![a, b], vjp))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ks = S::from_f64(k);
        let out = self.nodes[a].value.map(|v| v * ks);
        let vjp: VjpFn<S> =
            Box::new(move |g, needed| vec![needed[0].then(|| g.map(|v| v * ks))]);
        self.push_op(out, vec![a], vjp)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let ks = S::from_f64(k);
        let out = self.nodes[a].value.map(|v| v + ks);
        let vjp: VjpFn<S> = Box::new(move |g, needed| vec![needed[0].then(|| g.clone())]);
        self.push_op(out, vec![a], vjp)
    }

    // ---- matmul ----

    /// `a @ b` where `a` is `[.., m, k]` and `b` is either 2-D `[k, n]`
    /// (shared across leading dims) or `[.., k, n]` with identical leading
    /// dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NnError::Shape(format!("matmul: lhs {sa:?} vs rhs {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let shared_b = sb.len() == 2;
        if shared_b {
            if sb[0] != k {
                return Err(NnError::Shape(format!(
                    "matmul: inner dims differ, lhs {sa:?} vs rhs {sb:?}"
                )));
            }
        } else if sb.len() != sa.len()
            || sb[..sb.len() - 2] != sa[..sa.len() - 2]
            || sb[sb.len() - 2] != k
        {
            return Err(NnError::Shape(format!(
                "matmul: incompatible batched shapes, lhs {sa:?} vs rhs {sb:?}"
            )));
        }
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();

        let va = self.nodes[a].value.clone();
        let vb = self.nodes[b].value.clone();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::ZERO; batch * m * n];
        for l in 0..batch {
            let a_off = l * m * k;
            let b_off = if shared_b { 0 } else { l * k * n };
            mm(
                &va.data()[a_off..a_off + m * k],
                &vb.data()[b_off..b_off + k * n],
                &mut out[l * m * n..(l + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::from_vec(&out_shape, out)?;

        let sa_c = sa.clone();
        let sb_c = sb.clone();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            let mut da = None;
            let mut db = None;
            if needed[0] {
                // dA[l] = dC[l] * B^T
                let mut buf = vec![S::ZERO; batch * m * k];
                for l in 0..batch {
                    let b_off = if shared_b { 0 } else { l * k * n };
                    mm_bt(
                        &g.data()[l * m * n..(l + 1) * m * n],
                        &vb.data()[b_off..b_off + k * n],
                        &mut buf[l * m * k..(l + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                da = Some(Tensor::from_vec(&sa_c, buf).expect("matmul da shape"));
            }
            if needed[1] {
                // dB(l) = A[l]^T * dC[l], summed over l when B is shared
                let total = if shared_b { k * n } else { batch * k * n };
                let mut buf = vec![S::ZERO; total];
                for l in 0..batch {
                    let off = if shared_b { 0 } else { l * k * n };
                    mm_ta(
                        &va.data()[l * m * k..(l + 1) * m * k],
                        &g.data()[l * m * n..(l + 1) * m * n],
                        &mut buf[off..off + k * n],
                        m,
                        k,
                        n,
                    );
                }
                db = Some(Tensor::from_vec(&sb_c, buf).expect("matmul db shape"));
            }
            vec![da, db]
        });
        Ok(self.push_op(out, vec![a, b], vjp))
    }

    // ---- nonlinearities ----

    /// GELU, tanh approximation (the variant used in ViT-style blocks).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let va = self.nodes[a].value.clone();
        let out = va.map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (S::ONE + u.tanh())
        });
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| {
                            let u = c * (x + k * x * x * x);
                            let t = u.tanh();
                            let sech2 = S::ONE - t * t;
                            let du = c * (S::ONE + three * k * x * x);
                            gv * (half * (S::ONE + t) + half * x * sech2 * du)
                        })
                        .collect(),
                )
                .expect("gelu grad shape")
            })]
        });
        self.push_op(out, vec![a], vjp)
    }

    /// Numerically-stable softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| NnError::Shape("softmax on 0-d tensor".into()))?;
        let rows = self.nodes[a].value.numel() / d;
        let mut out = self.nodes[a].value.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let y = out.clone();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut dx = vec![S::ZERO; g.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Tensor::from_vec(g.shape(), dx).expect("softmax grad shape")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| NnError::Shape("log_softmax on 0-d tensor".into()))?;
        let rows = self.nodes[a].value.numel() / d;
        let mut out = self.nodes[a].value.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for v in row.iter() {
                sum += (*v - mx).exp();
            }
            let lse = mx + sum.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let ls = out.clone();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut dx = vec![S::ZERO; g.numel()];
                for r in 0..rows {
                    let lr = &ls.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let gsum: S = gr.iter().copied().sum();
                    for j in 0..d {
                        dx[r * d + j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                Tensor::from_vec(g.shape(), dx).expect("log_softmax grad shape")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| NnError::Shape("layer_norm on 0-d tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.nodes[x].value.numel() / d;
        let epss = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);

        let vx = self.nodes[x].value.clone();
        let vg = self.nodes[gamma].value.clone();
        let vb = self.nodes[beta].value.clone();

        let mut xhat = vec![S::ZERO; vx.numel()];
        let mut inv_std = vec![S::ZERO; rows];
        let mut out = vec![S::ZERO; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data()[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in xr {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in xr {
                let dv = v - mean;
                var += dv * dv;
            }
            var = var * inv_d;
            let istd = S::ONE / (var + epss).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (xr[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let xhat = Tensor::from_vec(&shape, xhat)?;

        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            let mut dx = None;
            let mut dgamma = None;
            let mut dbeta = None;
            if needed[1] {
                let mut buf = vec![S::ZERO; d];
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g.data()[r * d + j] * xhat.data()[r * d + j];
                    }
                }
                dgamma = Some(Tensor::from_vec(&[d], buf).expect("ln dgamma"));
            }
            if needed[2] {
                let mut buf = vec![S::ZERO; d];
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g.data()[r * d + j];
                    }
                }
                dbeta = Some(Tensor::from_vec(&[d], buf).expect("ln dbeta"));
            }
            if needed[0] {
                let mut buf = vec![S::ZERO; g.numel()];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat.data()[r * d..(r + 1) * d];
                    let mut mean_gy = S::ZERO;
                    let mut mean_gy_xh = S::ZERO;
                    for j in 0..d {
                        let gy = gr[j] * vg.data()[j];
                        mean_gy += gy;
                        mean_gy_xh += gy * xh[j];
                    }
                    mean_gy = mean_gy * inv_d;
                    mean_gy_xh = mean_gy_xh * inv_d;
                    for j in 0..d {
                        let gy = gr[j] * vg.data()[j];
                        buf[r * d + j] = inv_std[r] * (gy - mean_gy - xh[j] * mean_gy_xh);
                    }
                }
                dx = Some(Tensor::from_vec(g.shape(), buf).expect("ln dx"));
            }
            vec![dx, dgamma, dbeta]
        });
        Ok(self.push_op(out, vec![x, gamma, beta], vjp))
    }

    // ---- shape and data movement ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let out = self.nodes[a].value.reshaped(shape)?;
        let orig = self.shape(a).to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| g.reshaped(&orig).expect("reshape grad"))]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Permutes axes; `axes` is a permutation of `0..ndim`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        if axes.len() != shape.len() {
            return Err(NnError::Shape(format!(
                "permute axes {axes:?} for shape {shape:?}"
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(NnError::Shape(format!("invalid permutation {axes:?}")));
            }
            seen[ax] = true;
        }
        let out = permute_tensor(&self.nodes[a].value, axes);
        // inverse permutation for the gradient
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let vjp: VjpFn<S> =
            Box::new(move |g, needed| vec![needed[0].then(|| permute_tensor(g, &inv))]);
        Ok(self.push_op(out, vec![a], vjp))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: S = self.nodes[a].value.data().iter().copied().sum();
        let shape = self.shape(a).to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| Tensor::full(&shape, g.data()[0]))]
        });
        self.push_op(Tensor::scalar(total), vec![a], vjp)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NnError::Shape(format!("sum_axis {axis} on shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let va = self.nodes[a].value.clone();
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += va.data()[base + i];
                }
            }
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        let in_shape = shape;
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut buf = vec![S::ZERO; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            buf[base + i] = g.data()[o * inner + i];
                        }
                    }
                }
                Tensor::from_vec(&in_shape, buf).expect("sum_axis grad")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    // ---- elementwise analytic functions ----

    /// Square root with a guarded derivative at zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| v.sqrt());
        let y = out.clone();
        let floor = S::from_f64(1e-12);
        let half = S::from_f64(0.5);
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * half / yv.maximum(floor))
                        .collect(),
                )
                .expect("sqrt grad")
            })]
        });
        self.push_op(out, vec![a], vjp)
    }

    /// Absolute value; derivative at zero is zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = self.nodes[a].value.clone();
        let out = va.map(|v| v.abs());
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &xv)| {
                            if xv > S::ZERO {
                                gv
                            } else if xv < S::ZERO {
                                -gv
                            } else {
                                S::ZERO
                            }
                        })
                        .collect(),
                )
                .expect("abs grad")
            })]
        });
        self.push_op(out, vec![a], vjp)
    }

    // ---- token gathering / scattering ----

    /// Gathers rows along the token axis of `[B, N, D]` using per-batch
    /// index lists (all the same length M); output `[B, M, D]`.
    pub fn gather_tokens(&mut self, a: NodeId, idx: &[Vec<usize>]) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(NnError::Shape(format!("gather_tokens expects [B,N,D], got {shape:?}")));
        }
        let (bsz, n, d) = (shape[0], shape[1], shape[2]);
        if idx.len() != bsz {
            return Err(NnError::Shape(format!(
                "gather_tokens: {} index lists for batch {bsz}",
                idx.len()
            )));
        }
        let m = idx.first().map_or(0, |v| v.len());
        for (b, list) in idx.iter().enumerate() {
            if list.len() != m {
                return Err(NnError::Shape(format!(
                    "gather_tokens: ragged index lists ({} vs {m})",
                    list.len()
                )));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                return Err(NnError::Shape(format!(
                    "gather_tokens: index {bad} out of range for N={n} (batch {b})"
                )));
            }
        }
        let va = self.nodes[a].value.clone();
        let mut out = Vec::with_capacity(bsz * m * d);
        for (b, list) in idx.iter().enumerate() {
            for &i in list {
                let off = (b * n + i) * d;
                out.extend_from_slice(&va.data()[off..off + d]);
            }
        }
        let out = Tensor::from_vec(&[bsz, m, d], out)?;
        let idx_c: Vec<Vec<usize>> = idx.to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut buf = vec![S::ZERO; bsz * n * d];
                for (b, list) in idx_c.iter().enumerate() {
                    for (j, &i) in list.iter().enumerate() {
                        let src = (b * m + j) * d;
                        let dst = (b * n + i) * d;
                        for q in 0..d {
                            buf[dst + q] += g.data()[src + q];
                        }
                    }
                }
                Tensor::from_vec(&[bsz, n, d], buf).expect("gather grad")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Rebuilds a full `[B, N, D]` sequence from visible rows `[B, M, D]`:
    /// row `visible_idx[b][j]` comes from the input, every other position
    /// receives the shared learned `mask_token` (`[D]`).
    pub fn scatter_tokens(
        &mut self,
        visible: NodeId,
        mask_token: NodeId,
        visible_idx: &[Vec<usize>],
        n: usize,
    ) -> Result<NodeId, NnError> {
        let shape = self.shape(visible).to_vec();
        if shape.len() != 3 {
            return Err(NnError::Shape(format!(
                "scatter_tokens expects [B,M,D], got {shape:?}"
            )));
        }
        let (bsz, m, d) = (shape[0], shape[1], shape[2]);
        if self.shape(mask_token) != [d] {
            return Err(NnError::Shape(format!(
                "mask token {:?} must be [{d}]",
                self.shape(mask_token)
            )));
        }
        if visible_idx.len() != bsz || visible_idx.iter().any(|v| v.len() != m) {
            return Err(NnError::Shape("scatter_tokens: index lists must be [B][M]".into()));
        }
        let vv = self.nodes[visible].value.clone();
        let vm = self.nodes[mask_token].value.clone();
        let mut out = vec![S::ZERO; bsz * n * d];
        let mut is_visible = vec![false; bsz * n];
        for (b, list) in visible_idx.iter().enumerate() {
            for (j, &i) in list.iter().enumerate() {
                if i >= n {
                    return Err(NnError::Shape(format!(
                        "scatter_tokens: index {i} out of range for N={n}"
                    )));
                }
                is_visible[b * n + i] = true;
                let src = (b * m + j) * d;
                let dst = (b * n + i) * d;
                out[dst..dst + d].copy_from_slice(&vv.data()[src..src + d]);
            }
        }
        for b in 0..bsz {
            for i in 0..n {
                if !is_visible[b * n + i] {
                    let dst = (b * n + i) * d;
                    out[dst..dst + d].copy_from_slice(vm.data());
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, n, d], out)?;
        let idx_c: Vec<Vec<usize>> = visible_idx.to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            let mut dvis = None;
            let mut dmask = None;
            if needed[0] {
                let mut buf = vec![S::ZERO; bsz * m * d];
                for (b, list) in idx_c.iter().enumerate() {
                    for (j, &i) in list.iter().enumerate() {
                        let src = (b * n + i) * d;
                        let dst = (b * m + j) * d;
                        buf[dst..dst + d].copy_from_slice(&g.data()[src..src + d]);
                    }
                }
                dvis = Some(Tensor::from_vec(&[bsz, m, d], buf).expect("scatter dvis"));
            }
            if needed[1] {
                let mut vis_mask = vec![false; bsz * n];
                for (b, list) in idx_c.iter().enumerate() {
                    for &i in list {
                        vis_mask[b * n + i] = true;
                    }
                }
                let mut buf = vec![S::ZERO; d];
                for b in 0..bsz {
                    for i in 0..n {
                        if !vis_mask[b * n + i] {
                            let src = (b * n + i) * d;
                            for q in 0..d {
                                buf[q] += g.data()[src + q];
                            }
                        }
                    }
                }
                dmask = Some(Tensor::from_vec(&[d], buf).expect("scatter dmask"));
            }
            vec![dvis, dmask]
        });
        Ok(self.push_op(out, vec![visible, mask_token], vjp))
    }

    /// Per-row class selection: `x` is `[R, K]`, `idx` has length R,
    /// output `[R]` with `out[r] = x[r, idx[r]]`.
    pub fn select_index(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(NnError::Shape(format!("select_index expects [R,K], got {shape:?}")));
        }
        let (rows, k) = (shape[0], shape[1]);
        if idx.len() != rows {
            return Err(NnError::Shape(format!(
                "select_index: {} indices for {rows} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(NnError::Shape(format!("select_index: class {bad} out of range K={k}")));
        }
        let va = self.nodes[a].value.clone();
        let out: Vec<S> = idx.iter().enumerate().map(|(r, &i)| va.data()[r * k + i]).collect();
        let out = Tensor::from_vec(&[rows], out)?;
        let idx_c = idx.to_vec();
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut buf = vec![S::ZERO; rows * k];
                for (r, &i) in idx_c.iter().enumerate() {
                    buf[r * k + i] = g.data()[r];
                }
                Tensor::from_vec(&[rows, k], buf).expect("select grad")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Cuts `[B, T, C, H, W]` into non-overlapping `(pt, ph, pw)` tubelets:
    /// output `[B, N, K]` with `N = (T/pt)(H/ph)(W/pw)` tokens in
    /// (t, h, w) order and `K = C*pt*ph*pw` per-token values in
    /// (c, dt, dh, dw) order. Exact inverse of [`Graph::unpatchify`].
    pub fn patchify(
        &mut self,
        a: NodeId,
        patch: (usize, usize, usize),
    ) -> Result<NodeId, NnError> {
        let shape = self.shape(a).to_vec();
        let dims = patch_dims(&shape, patch)?;
        let va = self.nodes[a].value.clone();
        let mut out = vec![S::ZERO; va.numel()];
        patch_move(va.data(), &mut out, &dims, true);
        let out = Tensor::from_vec(&[dims.b, dims.tokens(), dims.token_len()], out)?;
        let in_shape = shape;
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut buf = vec![S::ZERO; g.numel()];
                patch_move(g.data(), &mut buf, &dims, false);
                Tensor::from_vec(&in_shape, buf).expect("patchify grad")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }

    /// Reassembles `[B, N, K]` tokens into `[B, T, C, H, W]`; exact inverse
    /// of [`Graph::patchify`].
    pub fn unpatchify(
        &mut self,
        a: NodeId,
        out_shape: (usize, usize, usize, usize, usize),
        patch: (usize, usize, usize),
    ) -> Result<NodeId, NnError> {
        let (b, t, c, h, w) = out_shape;
        let full = vec![b, t, c, h, w];
        let dims = patch_dims(&full, patch)?;
        let in_shape = self.shape(a).to_vec();
        if in_shape != [dims.b, dims.tokens(), dims.token_len()] {
            return Err(NnError::Shape(format!(
                "unpatchify: tokens {in_shape:?} do not match target {full:?} with patch {patch:?}"
            )));
        }
        let va = self.nodes[a].value.clone();
        let mut out = vec![S::ZERO; va.numel()];
        patch_move(va.data(), &mut out, &dims, false);
        let out = Tensor::from_vec(&full, out)?;
        let vjp: VjpFn<S> = Box::new(move |g, needed| {
            vec![needed[0].then(|| {
                let mut buf = vec![S::ZERO; g.numel()];
                patch_move(g.data(), &mut buf, &dims, true);
                Tensor::from_vec(&in_shape, buf).expect("unpatchify grad")
            })]
        });
        Ok(self.push_op(out, vec![a], vjp))
    }
}

/// Tubelet geometry shared by patchify/unpatchify.
#[derive(Clone, Copy)]
struct PatchDims {
    b: usize,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    pt: usize,
    ph: usize,
    pw: usize,
}

impl PatchDims {
    fn grid(&self) -> (usize, usize, usize) {
        (self.t / self.pt, self.h / self.ph, self.w / self.pw)
    }
    fn tokens(&self) -> usize {
        let (gt, gh, gw) = self.grid();
        gt * gh * gw
    }
    fn token_len(&self) -> usize {
        self.c * self.pt * self.ph * self.pw
    }
}

fn patch_dims(shape: &[usize], patch: (usize, usize, usize)) -> Result<PatchDims, NnError> {
    if shape.len() != 5 {
        return Err(NnError::Shape(format!("expected [B,T,C,H,W], got {shape:?}")));
    }
    let (b, t, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (pt, ph, pw) = patch;
    if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(NnError::Shape(format!(
            "patch {patch:?} does not divide input (T,H,W)=({t},{h},{w})"
        )));
    }
    Ok(PatchDims { b, t, c, h, w, pt, ph, pw })
}

/// Moves values between `[B,T,C,H,W]` and token layout. `forward` packs
/// pixels into tokens; otherwise unpacks. Bijective, so it serves as both
/// forward kernels and gradients.
fn patch_move<S: Scalar>(src: &[S], dst: &mut [S], d: &PatchDims, forward: bool) {
    let (gt, gh, gw) = d.grid();
    let token_len = d.token_len();
    for b in 0..d.b {
        for t0 in 0..gt {
            for h0 in 0..gh {
                for w0 in 0..gw {
                    let token = ((b * gt + t0) * gh + h0) * gw + w0;
                    for c in 0..d.c {
                        for dt in 0..d.pt {
                            let t = t0 * d.pt + dt;
                            for dh in 0..d.ph {
                                let y = h0 * d.ph + dh;
                                let row_pix =
                                    (((b * d.t + t) * d.c + c) * d.h + y) * d.w + w0 * d.pw;
                                let row_tok = token * token_len
                                    + ((c * d.pt + dt) * d.ph + dh) * d.pw;
                                if forward {
                                    dst[row_tok..row_tok + d.pw]
                                        .copy_from_slice(&src[row_pix..row_pix + d.pw]);
                                } else {
                                    dst[row_pix..row_pix + d.pw]
                                        .copy_from_slice(&src[row_tok..row_tok + d.pw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = a(m x k) @ b(k x n)`, row-major, fixed ikj order.
fn mm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out(m x k) += c(m x n) @ b(k x n)^T`.
fn mm_bt<S: Scalar>(c: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::ZERO;
            for j in 0..n {
                s += crow[j] * brow[j];
            }
            orow[p] += s;
        }
    }
}

/// `out(k x n) += a(m x k)^T @ c(m x n)`.
fn mm_ta<S: Scalar>(a: &[S], c: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
}

/// Elementwise op where `b` matches `a`'s trailing dims.
fn broadcast_zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let bl = b.numel();
    let data: Vec<S> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, b.data()[i % bl]))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("broadcast_zip shape")
}

/// Sums `grad` over leading dims so it collapses to `shape` (a trailing
/// suffix of grad's shape).
fn reduce_to_suffix<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let suffix: usize = shape.iter().product();
    let mut out = vec![S::ZERO; suffix.max(1)];
    for (i, &g) in grad.data().iter().enumerate() {
        out[i % suffix.max(1)] += g;
    }
    Tensor::from_vec(shape, out).expect("reduce_to_suffix shape")
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = t.strides();
    let mut out = vec![S::ZERO; t.numel()];
    let ndim = axes.len();
    let mut idx = vec![0usize; ndim];
    for (o, slot) in out.iter_mut().enumerate() {
        // decode output coordinates
        let mut rem = o;
        for d in (0..ndim).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..ndim {
            src += idx[d] * in_strides[axes[d]];
        }
        *slot = t.data()[src];
    }
    Tensor::from_vec(&out_shape, out).expect("permute shape")
}
