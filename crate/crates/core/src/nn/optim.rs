//! Named parameters, AdamW and the one-cycle cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{NnError, Scalar};

/// One parameter with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step: u64,
}

/// Ordered map of named parameters. Iteration (and therefore checkpoint
/// layout and update order) is name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<(), NnError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::State(format!("parameter {name} already registered")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name,
            ParamEntry {
                value,
                grad: None,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::State(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>, NnError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::State(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Copies values for the names present in `other` (shapes must match).
    pub fn load_values_from(&mut self, other: &ParamStore<S>) -> Result<(), NnError> {
        for (name, entry) in other.iter() {
            let own = self.get_mut(name)?;
            if own.value.shape() != entry.value.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    entry.value.shape(),
                    own.value.shape()
                )));
            }
            own.value = entry.value.clone();
        }
        Ok(())
    }

    /// Inserts every parameter into a graph as a leaf; `trainable` decides
    /// whether it participates in backward.
    pub fn stage(&self, g: &mut Graph<S>, trainable: impl Fn(&str) -> bool) -> GraphParams {
        let mut ids = BTreeMap::new();
        for (name, entry) in &self.entries {
            let id = if trainable(name) {
                g.param(entry.value.clone())
            } else {
                g.constant(entry.value.clone())
            };
            ids.insert(name.clone(), id);
        }
        GraphParams { ids }
    }

    /// Pulls gradients computed by `Graph::backward` back into the store.
    pub fn collect_grads(
        &mut self,
        gp: &GraphParams,
        grads: &[Option<Tensor<S>>],
    ) -> Result<(), NnError> {
        for (name, &id) in &gp.ids {
            if let Some(g) = grads.get(id).and_then(|g| g.as_ref()) {
                self.get_mut(name)?.grad = Some(g.clone());
            }
        }
        Ok(())
    }

    /// One AdamW update over the parameters selected by `filter`:
    /// bias-corrected moments, decoupled weight decay applied directly to
    /// the parameter. Selected parameters must have gradients.
    pub fn adamw_step(
        &mut self,
        cfg: &AdamWConfig,
        lr: f64,
        filter: impl Fn(&str) -> bool,
    ) -> Result<(), NnError> {
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
        let eps = S::from_f64(cfg.eps);
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(cfg.weight_decay);
        for (name, e) in self.entries.iter_mut() {
            if !filter(name) {
                continue;
            }
            let grad = e.grad.as_ref().ok_or_else(|| {
                NnError::State(format!("parameter {name} has no gradient populated"))
            })?;
            e.step += 1;
            let bc1 = S::ONE - S::from_f64(cfg.beta1.powi(e.step as i32));
            let bc2 = S::ONE - S::from_f64(cfg.beta2.powi(e.step as i32));
            let (pv, mv, vv) = (e.value.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..pv.len() {
                let gi = grad.data()[i];
                mv[i] = b1 * mv[i] + one_m_b1 * gi;
                vv[i] = b2 * vv[i] + one_m_b2 * gi * gi;
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                pv[i] = pv[i] - lr_s * (mhat / (vhat.sqrt() + eps) + wd * pv[i]);
            }
        }
        Ok(())
    }
}

/// Node ids of staged parameters for one graph.
pub struct GraphParams {
    ids: BTreeMap<String, NodeId>,
}

impl GraphParams {
    /// Builds directly from explicit ids (gradient-check plumbing).
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        Self { ids }
    }

    pub fn get(&self, name: &str) -> Result<NodeId, NnError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NnError::State(format!("parameter {name} not staged")))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// AdamW hyperparameters (the learning rate comes from the schedule).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// One-cycle cosine schedule: linear warmup from `max_lr/25` to `max_lr`
/// over `warmup_fraction` of the run, then cosine decay to `max_lr/1e4`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self, NnError> {
        if max_lr <= 0.0 {
            return Err(NnError::Config(format!("max_lr {max_lr} must be positive")));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(NnError::Config(format!(
                "warmup_fraction {warmup_fraction} outside [0,1)"
            )));
        }
        Ok(Self { max_lr, total_steps, warmup_fraction })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        one_cycle_lr(self, step)
    }
}

/// Learning rate at `step`; steps beyond `total_steps` clamp to the floor.
pub fn one_cycle_lr(s: &LrSchedule, step: u64) -> f64 {
    let start = s.max_lr / 25.0;
    let floor = s.max_lr / 1e4;
    let warmup = (s.warmup_fraction * s.total_steps as f64).round() as u64;
    if step >= s.total_steps {
        return floor;
    }
    if warmup > 0 && step <= warmup {
        let t = step as f64 / warmup as f64;
        return start + (s.max_lr - start) * t;
    }
    let denom = (s.total_steps - warmup) as f64;
    let t = (step - warmup) as f64 / denom;
    floor + 0.5 * (s.max_lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f32>) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(&[values.len()], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut s = store_with("w", vec![1.0, -2.0, 0.5]);
        s.get_mut("w").unwrap().grad = Some(Tensor::zeros(&[3]));
        let cfg = AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() };
        s.adamw_step(&cfg, 0.01, |_| true).unwrap();
        let got = s.get("w").unwrap().value.data().to_vec();
        for (g, orig) in got.iter().zip([1.0f32, -2.0, 0.5]) {
            assert!((g - orig * (1.0 - 0.001)).abs() < 1e-7, "{g} vs {}", orig * 0.999);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // closed form: m_hat = g, v_hat = g^2, update = lr * g/(|g|+eps)
        let mut s = store_with("w", vec![0.0, 0.0]);
        s.get_mut("w").unwrap().grad =
            Some(Tensor::from_vec(&[2], vec![3.0, -0.25]).unwrap());
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        s.adamw_step(&cfg, 0.01, |_| true).unwrap();
        let got = s.get("w").unwrap().value.data().to_vec();
        assert!((got[0] - (-0.01)).abs() < 1e-5, "{got:?}");
        assert!((got[1] - 0.01).abs() < 1e-5, "{got:?}");
    }

    #[test]
    fn identical_state_and_grads_update_identically() {
        let make = || {
            let mut s = store_with("w", vec![0.3, -0.7, 1.1, 0.0]);
            s.get_mut("w").unwrap().grad =
                Some(Tensor::from_vec(&[4], vec![0.1, 0.2, -0.3, 0.4]).unwrap());
            s
        };
        let mut a = make();
        let mut b = make();
        let cfg = AdamWConfig::default();
        for _ in 0..5 {
            a.adamw_step(&cfg, 3e-4, |_| true).unwrap();
            b.adamw_step(&cfg, 3e-4, |_| true).unwrap();
        }
        assert_eq!(a.get("w").unwrap().value.data(), b.get("w").unwrap().value.data());
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut s = store_with("w", vec![1.0]);
        assert!(matches!(
            s.adamw_step(&AdamWConfig::default(), 1e-3, |_| true),
            Err(NnError::State(_))
        ));
    }

    #[test]
    fn filtered_params_stay_put() {
        let mut s = store_with("enc.w", vec![1.0]);
        s.insert("head.w", Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
        s.get_mut("head.w").unwrap().grad = Some(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        // encoder has no grad, but the filter excludes it, so no error
        s.adamw_step(&AdamWConfig::default(), 1e-2, |n| n.starts_with("head."))
            .unwrap();
        assert_eq!(s.get("enc.w").unwrap().value.data(), &[1.0]);
        assert_ne!(s.get("head.w").unwrap().value.data(), &[2.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(5e-4, 1000, 0.1).unwrap();
        // step 0: max/25
        assert!((one_cycle_lr(&s, 0) - 5e-4 / 25.0).abs() < 1e-12);
        // warmup end: exactly max
        assert!((one_cycle_lr(&s, 100) - 5e-4).abs() < 1e-12);
        // final step: floor within 1e-9 (cosine evaluated at pi)
        let end = one_cycle_lr(&s, 1000);
        assert!((end - 5e-4 / 1e4).abs() < 1e-9, "end lr {end}");
        // beyond total: clamped
        assert_eq!(one_cycle_lr(&s, 5000), 5e-4 / 1e4);
        // monotone rise through warmup
        assert!(one_cycle_lr(&s, 50) > one_cycle_lr(&s, 10));
        // decay after warmup
        assert!(one_cycle_lr(&s, 500) < 5e-4);
    }

    #[test]
    fn zero_warmup_starts_at_max() {
        let s = LrSchedule::new(1e-3, 100, 0.0).unwrap();
        assert!((one_cycle_lr(&s, 0) - 1e-3).abs() < 1e-12);
    }
}
