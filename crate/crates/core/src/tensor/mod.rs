//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on tensors
//! that require gradients record their inputs plus a backward closure; calling
//! [`Tensor::backward`] on a scalar walks that record in reverse topological
//! order. Graphs are built fresh for each forward pass and dropped with the
//! loss tensor.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub(crate) mod ops;
pub mod optim;
mod real;

pub use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub use real::Real;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: input {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Arguments handed to a backward closure.
pub(crate) struct BackwardArgs<'a, F: Real> {
    pub grad: &'a [F],
    pub out: &'a [F],
    pub inputs: &'a [Tensor<F>],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>> + Send + Sync>;

struct GradFn<F: Real> {
    name: &'static str,
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<F>>>,
    grad_fn: Option<GradFn<F>>,
}

/// Dense row-major array with optional gradient tracking.
pub struct Tensor<F: Real = f32> {
    node: Arc<Node<F>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.name);
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &op)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    fn make(shape: Vec<usize>, data: Arc<Vec<F>>, requires_grad: bool, grad_fn: Option<GradFn<F>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::from_shared(shape, Arc::new(data), false)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::from_shared(shape, Arc::new(data), true)
    }

    pub fn from_shared(shape: &[usize], data: Arc<Vec<F>>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::make(shape.to_vec(), data, requires_grad, None))
    }

    pub fn scalar(x: F) -> Self {
        Self::make(vec![1], Arc::new(vec![x]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), Arc::new(vec![F::zero(); numel(shape)]), false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::make(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    /// Result of an operation. Records `backward` only if some input tracks gradients.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        inputs: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            inputs,
            backward,
        });
        Self::make(shape, Arc::new(data), requires_grad, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn values(&self) -> &[F] {
        &self.node.data
    }

    pub fn shared_values(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.node.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Sets the gradient to zeros if backward never reached this tensor.
    pub fn ensure_grad(&self) {
        let mut g = self.node.grad.lock().expect("grad lock");
        if g.is_none() {
            *g = Some(vec![F::zero(); self.numel()]);
        }
    }

    fn accumulate_grad(&self, g: &[F]) {
        let mut cell = self.node.grad.lock().expect("grad lock");
        match cell.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *cell = Some(g.to_vec()),
        }
    }

    /// Identity in the forward pass; contributes no gradient to `self` or its ancestors.
    pub fn stop_grad(&self) -> Self {
        Self::make(self.node.shape.clone(), self.shared_values(), false, None)
    }

    /// Backpropagates from this scalar into every reachable leaf that tracks gradients.
    /// Intermediate results do not keep their gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<F>> = HashMap::new();
        pending.insert(self.id(), vec![F::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(gf) = &t.node.grad_fn {
                let needs: Vec<bool> = gf.inputs.iter().map(Tensor::requires_grad).collect();
                let args = BackwardArgs {
                    grad: &g,
                    out: t.values(),
                    inputs: &gf.inputs,
                    needs: &needs,
                };
                let input_grads = (gf.backward)(&args);
                debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.name);
                for (inp, ig) in gf.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), inp.numel(), "{}", gf.name);
                    match pending.get_mut(&inp.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(inp.id(), ig);
                        }
                    }
                }
                continue;
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Tensors reachable through gradient-tracking edges, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((t, child)) = stack.pop() {
            let inputs = t.node.grad_fn.as_ref().map(|g| g.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((t, child + 1));
                if next.requires_grad() && seen.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    /// Same values in another element type, detached from any graph.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        let data = self.values().iter().map(|v| G::of(v.f64())).collect();
        Tensor::make(self.shape().to_vec(), Arc::new(data), false, None)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values().iter().map(|v| v.f64()).collect()
    }
}
