//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<F>>,
}

/// Learnable parameters addressed by stable hierarchical names
/// (`decoder.layer0.cross.wq`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<F>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            value: Arc::new(value),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].value
    }

    pub fn set_values(&mut self, id: ParamId, value: Vec<F>) {
        assert_eq!(value.len(), self.entries[id.0].value.len());
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Leaf tensors for one forward pass. They share storage with the store.
    pub fn bind(&self, requires_grad: bool) -> Bound<F> {
        self.bind_where(|_| requires_grad)
    }

    /// Like [`bind`](Self::bind), tracking gradients only where `track(name)` holds.
    pub fn bind_where(&self, track: impl Fn(&str) -> bool) -> Bound<F> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                Tensor::from_shared(&e.shape, Arc::clone(&e.value), track(&e.name))
                    .expect("stored parameter is well-formed")
            })
            .collect();
        Bound { tensors }
    }
}

/// Parameters bound as graph leaves for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Bound<F: Real> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Bound<F> {
    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    /// Gradients of `ids`, in order. A parameter without a gradient is an error.
    pub fn grads(&self, store: &ParamStore<F>, ids: &[ParamId]) -> Result<Vec<Vec<F>>> {
        ids.iter()
            .map(|&id| {
                self.tensors[id.0]
                    .grad()
                    .ok_or_else(|| TensorError::MissingGrad(store.entry(id).name.clone()))
            })
            .collect()
    }

    /// Gives every tracked parameter the backward pass never reached a zero gradient.
    pub fn fill_missing_grads(&self) {
        self.tensors.iter().filter(|t| t.requires_grad()).for_each(Tensor::ensure_grad);
    }

    pub fn zero_grads(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moments per parameter, with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: HashMap<ParamId, Vec<F>>,
    pub v: HashMap<ParamId, Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One Adam update of `ids` with the matching `grads`.
    pub fn apply(&mut self, store: &mut ParamStore<F>, ids: &[ParamId], grads: &[Vec<F>]) {
        assert_eq!(ids.len(), grads.len());
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step_size = F::of(c.lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(c.eps);
        let decay = F::of(c.lr * c.weight_decay);
        for (&id, g) in ids.iter().zip(grads) {
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![F::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![F::zero(); n]);
            let mut p = store.values(id).to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] = p[i] - decay * p[i] - step_size * m[i] / denom;
            }
            store.set_values(id, p);
        }
    }

    /// Reads gradients from `bound`, updates `ids`, then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<F>, bound: &Bound<F>, ids: &[ParamId]) -> Result<()> {
        let grads = bound.grads(store, ids)?;
        self.apply(store, ids, &grads);
        bound.zero_grads();
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", &[1], vec![v]);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = one_param(1.0);
        let mut opt = OptimizerState::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.apply(&mut store, &[id], &[vec![1.0]]);
        // bias-corrected m̂ = v̂ = 1, update = lr · 1 / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.values(id)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut store, id) = one_param(2.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg);
        opt.apply(&mut store, &[id], &[vec![0.0]]);
        let change = (store.values(id)[0] - 2.0).abs();
        assert!(change <= cfg.lr * cfg.weight_decay * 2.0 + 1e-15);
    }

    #[test]
    fn second_moment_nondecreasing_under_constant_grad() {
        let (mut store, id) = one_param(0.5);
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.apply(&mut store, &[id], &[vec![0.3]]);
        let v1 = opt.v[&id][0];
        opt.apply(&mut store, &[id], &[vec![0.3]]);
        assert!(opt.v[&id][0] >= v1);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn missing_grad_rejected() {
        let (mut store, id) = one_param(0.5);
        let bound = store.bind(true);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let err = opt.step(&mut store, &bound, &[id]).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn step_zeroes_grads() {
        let (mut store, id) = one_param(0.5);
        let bound = store.bind(true);
        bound.get(id).mul(bound.get(id)).unwrap().sum().backward().unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut store, &bound, &[id]).unwrap();
        assert!(bound.get(id).grad().is_none());
        assert!(store.values(id)[0] < 0.5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let n = clip_global_norm(&mut g, 0.1);
        assert!((n - 5.0).abs() < 1e-12);
        let after = (g[0][0] * g[0][0] + g[1][0] * g[1][0]).sqrt();
        assert!((after - 0.1).abs() < 1e-12);
    }
}
