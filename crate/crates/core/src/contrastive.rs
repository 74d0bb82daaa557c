//! Universal object queue, momentum (EMA) twin of the contrastive head, the
//! object center, and the queue-anchored contrastive loss.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::optim::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("cannot normalize a zero vector (entry {0})")]
    ZeroVector(usize),
    #[error("embedding has dimension {got}, queue holds dimension {want}")]
    Dimension { want: usize, got: usize },
    #[error("object queue is empty")]
    EmptyQueue,
    #[error("queue embeddings cancel out; the center is undefined")]
    DegenerateCenter,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const NORM_EPS: f64 = 1e-12;

fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (n > NORM_EPS).then(|| v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Fixed-capacity FIFO of unit-norm embeddings, stored as a ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f32>,
    len: usize,
    /// Slot the next embedding is written to.
    cursor: usize,
}

impl ObjectQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0);
        Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        }
    }

    /// Full queue of normalized Gaussian vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut q = Self::new(capacity, dim);
        while q.len < capacity {
            let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            if let Some(u) = normalized(&v) {
                q.push_unit(&u);
            }
        }
        q
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn push_unit(&mut self, u: &[f32]) {
        let c = self.cursor;
        self.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(u);
        self.cursor = (c + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// L2-normalizes and appends each embedding, evicting the oldest beyond
    /// capacity. Nothing is written if any embedding is rejected.
    pub fn enqueue(&mut self, embeddings: &[Vec<f32>]) -> Result<(), ContrastiveError> {
        let mut units = Vec::with_capacity(embeddings.len());
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != self.dim {
                return Err(ContrastiveError::Dimension {
                    want: self.dim,
                    got: e.len(),
                });
            }
            units.push(normalized(e).ok_or(ContrastiveError::ZeroVector(i))?);
        }
        units.iter().for_each(|u| self.push_unit(u));
        Ok(())
    }

    /// Stored embeddings, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        let start = (self.cursor + self.capacity - self.len) % self.capacity;
        (0..self.len).map(move |k| {
            let s = (start + k) % self.capacity;
            &self.data[s * self.dim..(s + 1) * self.dim]
        })
    }

    /// Embeddings oldest first, flattened row-major.
    pub fn to_rows(&self) -> Vec<f32> {
        self.iter().flatten().copied().collect()
    }

    /// Rebuilds a queue from oldest-first rows.
    pub fn from_rows(capacity: usize, dim: usize, rows: &[f32]) -> Result<Self, ContrastiveError> {
        let mut q = Self::new(capacity, dim);
        if !rows.len().is_multiple_of(dim) {
            return Err(ContrastiveError::Dimension {
                want: dim,
                got: rows.len() % dim,
            });
        }
        rows.chunks_exact(dim).for_each(|r| q.push_unit(r));
        Ok(q)
    }

    /// Normalized mean of all stored embeddings.
    pub fn object_center(&self) -> Result<ObjectCenter, ContrastiveError> {
        if self.is_empty() {
            return Err(ContrastiveError::EmptyQueue);
        }
        let mut mean = vec![0.0f64; self.dim];
        for e in self.iter() {
            mean.iter_mut().zip(e).for_each(|(m, &x)| *m += x as f64);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= NORM_EPS * self.len as f64 {
            return Err(ContrastiveError::DegenerateCenter);
        }
        Ok(ObjectCenter(mean.iter().map(|x| x / norm).collect()))
    }
}

/// Unit-norm mean direction of the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCenter(pub Vec<f64>);

impl ObjectCenter {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Online contrastive-head parameters paired with their slowly-updated twin.
#[derive(Debug, Clone)]
pub struct ContrastiveHeads<F: Real> {
    pub alpha: f64,
    /// Online parameters, in the model's store.
    pub online: Vec<ParamId>,
    /// Momentum copies, index-aligned with `online`.
    pub momentum: ParamStore<F>,
}

impl<F: Real> ContrastiveHeads<F> {
    /// Copies the online parameters as the initial momentum twin.
    pub fn new(store: &ParamStore<F>, online: Vec<ParamId>, alpha: f64) -> Self {
        assert!((0.0..1.0).contains(&alpha), "momentum rate must be in [0, 1)");
        let mut momentum = ParamStore::new();
        for &id in &online {
            let e = store.entry(id);
            momentum.add(format!("momentum.{}", e.name), &e.shape, e.value.to_vec());
        }
        Self {
            alpha,
            online,
            momentum,
        }
    }

    /// `θ' ← α·θ' + (1 − α)·θ` for every parameter pair. The online store is untouched.
    pub fn ema_update(&mut self, store: &ParamStore<F>) {
        let a = F::of(self.alpha);
        let b = F::one() - a;
        for (k, &id) in self.online.iter().enumerate() {
            let mid = ParamId(k);
            let theta = store.values(id);
            let next: Vec<F> = self
                .momentum
                .values(mid)
                .iter()
                .zip(theta)
                .map(|(&m, &t)| a * m + b * t)
                .collect();
            self.momentum.set_values(mid, next);
        }
    }
}

/// Row-wise L2 normalization `[n, d] → [n, d]`.
pub fn l2_normalize_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
    let norms = x.mul(x)?.sum_axis(1)?.add_scalar(F::of(NORM_EPS)).sqrt()?;
    x.transpose()?.div(&norms)?.transpose()
}

/// `−log( Σ₊ exp(v·k⁺) / (Σ₊ exp(v·k⁺) + Σ₋ exp(v·k⁻)) )`.
///
/// `positives` and `negatives` are `[n, d]` rows; the center is a constant.
/// Returns `None` when there are no positives.
pub fn contrastive_loss<F: Real>(
    center: &ObjectCenter,
    positives: Option<&Tensor<F>>,
    negatives: Option<&Tensor<F>>,
) -> Result<Option<Tensor<F>>, TensorError> {
    let Some(pos) = positives else { return Ok(None) };
    let d = center.dim();
    let v = Tensor::new(&[d, 1], center.0.iter().map(|&x| F::of(x)).collect())?;
    let pos_exp = pos.matmul(&v)?.exp().sum();
    let all_exp = match negatives {
        Some(neg) => pos_exp.add(&neg.matmul(&v)?.exp().sum())?,
        None => pos_exp.clone(),
    };
    Ok(Some(all_exp.log()?.sub(&pos_exp.log()?)?))
}
