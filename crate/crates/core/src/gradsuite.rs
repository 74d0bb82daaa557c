//! Finite-difference gradient checks over every primitive op and loss term.
//!
//! Each case evaluates `Σ w ⊙ op(x)` for a fixed random weight vector `w`, so
//! every output element contributes to the checked gradient. `stop_grad` is
//! left out: finite differences see through it by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{contrastive_loss, l2_normalize_rows, ObjectCenter};
use crate::geometry::{BBox, Mask};
use crate::losses::{box_losses, focal_loss, iou_head_loss, mask_losses};
use crate::tensor::gradcheck::{grad_check_in, ScalarFn};
use crate::tensor::{Real, Result, Tensor};

/// Tolerance on the relative error with the analytic gradient in `f64`.
pub const TOL_F64: f64 = 1e-6;
/// Tolerance on the relative error with the analytic gradient in `f32`.
pub const TOL_F32: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Inputs to non-smooth ops stay at least this far from a kink.
const KINK_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    BroadcastAdd,
    BroadcastMul,
    Maximum,
    Minimum,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Pow,
    Sigmoid,
    Relu,
    Gelu,
    Tanh,
    Abs,
    Softplus,
    LogSigmoid,
    Clamp,
    Sum,
    Mean,
    SumAxis0,
    SumAxis1,
    MeanAxis1,
    Softmax,
    LayerNorm,
    Matmul,
    MatmulT,
    Transpose,
    Reshape,
    Slice,
    Concat,
    IndexRows,
    Im2col,
    L2Normalize,
    Focal,
    BoxL1,
    BoxGiou,
    MaskBce,
    MaskDice,
    IouHead,
    Contrastive,
}

const OPS: [(Op, &str); 46] = [
    (Op::Add, "add"),
    (Op::Sub, "sub"),
    (Op::Mul, "mul"),
    (Op::Div, "div"),
    (Op::BroadcastAdd, "add_broadcast"),
    (Op::BroadcastMul, "mul_broadcast"),
    (Op::Maximum, "maximum"),
    (Op::Minimum, "minimum"),
    (Op::Neg, "neg"),
    (Op::Scale, "scale"),
    (Op::AddScalar, "add_scalar"),
    (Op::Exp, "exp"),
    (Op::Log, "log"),
    (Op::Sqrt, "sqrt"),
    (Op::Pow, "pow"),
    (Op::Sigmoid, "sigmoid"),
    (Op::Relu, "relu"),
    (Op::Gelu, "gelu"),
    (Op::Tanh, "tanh"),
    (Op::Abs, "abs"),
    (Op::Softplus, "softplus"),
    (Op::LogSigmoid, "log_sigmoid"),
    (Op::Clamp, "clamp"),
    (Op::Sum, "sum"),
    (Op::Mean, "mean"),
    (Op::SumAxis0, "sum_axis0"),
    (Op::SumAxis1, "sum_axis1"),
    (Op::MeanAxis1, "mean_axis1"),
    (Op::Softmax, "softmax"),
    (Op::LayerNorm, "layer_norm"),
    (Op::Matmul, "matmul"),
    (Op::MatmulT, "matmul_t"),
    (Op::Transpose, "transpose"),
    (Op::Reshape, "reshape"),
    (Op::Slice, "slice"),
    (Op::Concat, "concat"),
    (Op::IndexRows, "index_rows"),
    (Op::Im2col, "im2col"),
    (Op::L2Normalize, "l2_normalize_rows"),
    (Op::Focal, "focal_loss"),
    (Op::BoxL1, "box_l1_loss"),
    (Op::BoxGiou, "box_giou_loss"),
    (Op::MaskBce, "mask_bce_loss"),
    (Op::MaskDice, "mask_dice_loss"),
    (Op::IouHead, "iou_head_loss"),
    (Op::Contrastive, "contrastive_loss"),
];

/// One random instance: the op, its constants, and the output weights.
struct Case {
    op: Op,
    shape: Vec<usize>,
    weights: Vec<f64>,
    targets: Vec<bool>,
    reals: Vec<f64>,
    boxes: Vec<BBox>,
    masks: Vec<Mask>,
    center: ObjectCenter,
}

fn konst<F: Real>(shape: &[usize], v: &[f64]) -> Result<Tensor<F>> {
    Tensor::new(shape, v.iter().map(|&x| F::of(x)).collect())
}

impl ScalarFn for Case {
    fn eval<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let pair = || -> Result<(Tensor<F>, Tensor<F>)> {
            let half = x.shape()[0] / 2;
            Ok((x.slice(0, 0, half)?, x.slice(0, half, half)?))
        };
        let split = |n: usize| -> Result<(Tensor<F>, Tensor<F>)> {
            Ok((x.slice(0, 0, n)?, x.slice(0, n, x.numel() - n)?))
        };
        let y = match self.op {
            Op::Add => pair().and_then(|(a, b)| a.add(&b))?,
            Op::Sub => pair().and_then(|(a, b)| a.sub(&b))?,
            Op::Mul => pair().and_then(|(a, b)| a.mul(&b))?,
            Op::Div => pair().and_then(|(a, b)| a.div(&b))?,
            Op::Maximum => pair().and_then(|(a, b)| a.maximum(&b))?,
            Op::Minimum => pair().and_then(|(a, b)| a.minimum(&b))?,
            Op::BroadcastAdd => split(12).and_then(|(a, b)| a.reshape(&[3, 4])?.add(&b))?,
            Op::BroadcastMul => split(12).and_then(|(a, b)| a.reshape(&[3, 4])?.mul(&b))?,
            Op::Neg => x.neg(),
            Op::Scale => x.scale(F::of(-1.7)),
            Op::AddScalar => x.add_scalar(F::of(0.3)),
            Op::Exp => x.exp(),
            Op::Log => x.log()?,
            Op::Sqrt => x.sqrt()?,
            Op::Pow => x.pow(2.5)?,
            Op::Sigmoid => x.sigmoid(),
            Op::Relu => x.relu(),
            Op::Gelu => x.gelu(),
            Op::Tanh => x.tanh(),
            Op::Abs => x.abs(),
            Op::Softplus => x.softplus(),
            Op::LogSigmoid => x.log_sigmoid(),
            Op::Clamp => x.clamp(-0.5, 0.5),
            Op::Sum => x.sum(),
            Op::Mean => x.mean(),
            Op::SumAxis0 => x.sum_axis(0)?,
            Op::SumAxis1 => x.sum_axis(1)?,
            Op::MeanAxis1 => x.mean_axis(1)?,
            Op::Softmax => x.softmax(),
            Op::LayerNorm => x.layer_norm(1e-5),
            Op::Matmul => split(6).and_then(|(a, b)| a.reshape(&[2, 3])?.matmul(&b.reshape(&[3, 4])?))?,
            Op::MatmulT => split(6).and_then(|(a, b)| a.reshape(&[2, 3])?.matmul_t(&b.reshape(&[4, 3])?))?,
            Op::Transpose => x.transpose()?,
            Op::Reshape => x.reshape(&[5, 3])?,
            Op::Slice => x.slice(1, 1, 3)?,
            Op::Concat => Tensor::concat(&[x.slice(1, 2, 3)?, x.slice(1, 0, 2)?, x.clone()], 1)?,
            Op::IndexRows => x.index_rows(&[2, 0, 2, 1])?,
            Op::Im2col => x.im2col(3, 2, 1)?,
            Op::L2Normalize => l2_normalize_rows(x)?,
            Op::Focal => focal_loss(x, &self.targets)?,
            Op::BoxL1 => box_losses(x, &self.boxes)?.0,
            Op::BoxGiou => box_losses(x, &self.boxes)?.1,
            Op::MaskBce => mask_losses(x, &self.masks)?.0,
            Op::MaskDice => mask_losses(x, &self.masks)?.1,
            Op::IouHead => iou_head_loss(x, &self.reals)?,
            Op::Contrastive => {
                let e = l2_normalize_rows(x)?;
                let pos = e.slice(0, 0, 2)?;
                let neg = e.slice(0, 2, 3)?;
                contrastive_loss(&self.center, Some(&pos), Some(&neg))?.expect("positives present")
            }
        };
        let w = konst(y.shape(), &self.weights[..y.numel()])?;
        Ok(y.mul(&w)?.sum())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `[lo, hi]` at least `margin` away from every point of `kinks`.
fn away_from(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= margin) {
                break v;
            }
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::center(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
    )
}

/// Input point and constants for one case of `op`.
fn sample(op: Op, rng: &mut ChaCha8Rng) -> (Case, Vec<f64>) {
    let mut case = Case {
        op,
        shape: vec![3, 5],
        weights: uniform(rng, 128, -1.0, 1.0),
        targets: Vec::new(),
        reals: Vec::new(),
        boxes: Vec::new(),
        masks: Vec::new(),
        center: ObjectCenter(Vec::new()),
    };
    let x = match op {
        Op::Add | Op::Sub | Op::Mul => {
            case.shape = vec![4, 3];
            uniform(rng, 12, -2.0, 2.0)
        }
        Op::Div => {
            case.shape = vec![4, 3];
            let mut v = uniform(rng, 6, -2.0, 2.0);
            v.extend(uniform(rng, 6, 0.5, 2.0).into_iter().map(|d| if rng.random() { d } else { -d }));
            v
        }
        Op::Maximum | Op::Minimum => {
            case.shape = vec![4, 3];
            let a = uniform(rng, 6, -2.0, 2.0);
            let b: Vec<f64> = a
                .iter()
                .map(|&ai| ai + away_from(rng, 1, -1.0, 1.0, &[0.0], KINK_MARGIN)[0])
                .collect();
            [a, b].concat()
        }
        Op::BroadcastAdd | Op::BroadcastMul => {
            case.shape = vec![16];
            uniform(rng, 16, -2.0, 2.0)
        }
        Op::Log | Op::Sqrt | Op::Pow => uniform(rng, 15, 0.2, 3.0),
        Op::Relu | Op::Abs => away_from(rng, 15, -2.0, 2.0, &[0.0], KINK_MARGIN),
        Op::Clamp => away_from(rng, 15, -1.0, 1.0, &[-0.5, 0.5], KINK_MARGIN),
        Op::Matmul | Op::MatmulT => {
            case.shape = vec![18];
            uniform(rng, 18, -2.0, 2.0)
        }
        Op::IndexRows => {
            case.shape = vec![3, 4];
            uniform(rng, 12, -2.0, 2.0)
        }
        Op::Im2col => {
            case.shape = vec![5, 4, 2];
            uniform(rng, 40, -2.0, 2.0)
        }
        Op::L2Normalize => {
            case.shape = vec![4, 3];
            uniform(rng, 12, -2.0, 2.0)
        }
        Op::Focal => {
            case.shape = vec![6];
            case.targets = (0..6).map(|_| rng.random()).collect();
            uniform(rng, 6, -4.0, 4.0)
        }
        Op::BoxL1 | Op::BoxGiou => {
            case.shape = vec![3, 4];
            case.boxes = (0..3).map(|_| random_box(rng)).collect();
            let mut v = Vec::new();
            for b in &case.boxes {
                let g = b.cxcywh();
                for (k, &gk) in g.iter().enumerate() {
                    let lo = if k < 2 { 0.2 } else { 0.1 };
                    let hi = if k < 2 { 0.8 } else { 0.5 };
                    v.extend(away_from(rng, 1, lo, hi, &[gk], KINK_MARGIN / 5.0));
                }
            }
            v
        }
        Op::MaskBce | Op::MaskDice => {
            case.shape = vec![2, 16];
            case.masks = (0..2)
                .map(|_| Mask::new(4, 4, (0..16).map(|_| rng.random()).collect()).expect("4x4"))
                .collect();
            uniform(rng, 32, 0.05, 0.95)
        }
        Op::IouHead => {
            case.shape = vec![5];
            case.reals = uniform(rng, 5, 0.0, 1.0);
            uniform(rng, 5, -3.0, 3.0)
        }
        Op::Contrastive => {
            case.shape = vec![5, 4];
            let c = uniform(rng, 4, -1.0, 1.0);
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            case.center = ObjectCenter(c.iter().map(|v| v / n).collect());
            uniform(rng, 20, -2.0, 2.0)
        }
        _ => uniform(rng, 15, -2.0, 2.0),
    };
    (case, x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    /// Worst relative error with the analytic gradient in `f64`.
    pub max_err_f64: f64,
    /// Worst relative error with the analytic gradient in `f32`.
    pub max_err_f32: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_err_f64 < TOL_F64 && self.max_err_f32 < TOL_F32
    }
}

pub fn op_names() -> impl Iterator<Item = &'static str> {
    OPS.iter().map(|&(_, n)| n)
}

/// Runs `cases` random checks per op in both precisions.
pub fn run(cases: usize, seed: u64) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(k, &(op, name))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let (mut e64, mut e32) = (0.0f64, 0.0f64);
            for _ in 0..cases {
                let (case, x) = sample(op, &mut rng);
                e64 = e64.max(grad_check_in::<f64, _>(&case, &case.shape, &x, STEP)?);
                e32 = e32.max(grad_check_in::<f32, _>(&case, &case.shape, &x, STEP)?);
            }
            Ok(OpReport {
                name,
                cases,
                max_err_f64: e64,
                max_err_f32: e32,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_cases() {
        for r in run(5, 1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<&str> = op_names().collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), OPS.len());
    }
}
