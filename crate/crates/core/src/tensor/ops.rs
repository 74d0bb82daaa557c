//! Primitive differentiable operations.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, BackwardArgs, Real, Result, Tensor, TensorError};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn strip_ones(s: &[usize]) -> &[usize] {
    let i = s.iter().position(|&d| d != 1).unwrap_or(s.len());
    &s[i..]
}

/// Output shape of a binary op. The smaller operand must be a trailing suffix
/// of the larger (leading unit extents ignored) or hold a single element.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && na >= 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if na >= nb && a.ends_with(strip_ones(b)) {
        return Ok(a.to_vec());
    }
    if nb > na && b.ends_with(strip_ones(a)) {
        return Ok(b.to_vec());
    }
    Err(mismatch(op, a, b))
}

/// Folds a full-size gradient back onto a (possibly broadcast) operand.
/// Broadcasting repeats the operand cyclically, so the fold sums consecutive blocks.
fn fold_grad<F: Real>(len: usize, full: Vec<F>) -> Vec<F> {
    if full.len() == len {
        return full;
    }
    let mut out = vec![F::zero(); len];
    for block in full.chunks_exact(len) {
        out.iter_mut().zip(block).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<F: Real> Tensor<F> {
    fn binary(
        &self,
        other: &Tensor<F>,
        name: &'static str,
        f: fn(F, F) -> F,
        da: fn(F, F) -> F,
        db: fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let n = numel(&shape);
        let (a, b) = (self.values(), other.values());
        let data: Vec<F> = a.iter().cycle().zip(b.iter().cycle()).take(n).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_op(
            name,
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let (a, b) = (args.inputs[0].values(), args.inputs[1].values());
                let (na, nb) = (a.len(), b.len());
                let g = args.grad;
                let pairs = || g.iter().zip(a.iter().cycle().zip(b.iter().cycle()));
                let ga = args.needs[0]
                    .then(|| fold_grad(na, pairs().map(|(&gi, (&x, &y))| gi * da(x, y)).collect()));
                let gb = args.needs[1]
                    .then(|| fold_grad(nb, pairs().map(|(&gi, (&x, &y))| gi * db(x, y)).collect()));
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, "add", |a, b| a + b, |_, _| F::one(), |_, _| F::one())
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| F::one(), |_, _| -F::one())
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, "div", |a, b| a / b, |_, b| F::one() / b, |a, b| -a / (b * b))
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + Send + Sync + 'static,
    ) -> Tensor<F> {
        let data: Vec<F> = self.values().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let x = args.inputs[0].values();
                let g = args
                    .grad
                    .iter()
                    .zip(x.iter().zip(args.out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary("neg", |x| -x, |_, _| -F::one())
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        self.unary("add_scalar", move |x| x + c, |_, _| F::one())
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary("exp", F::exp, |_, y| y)
    }

    /// Natural log; negative inputs are rejected.
    pub fn log(&self) -> Result<Tensor<F>> {
        self.check_nonnegative("log")?;
        Ok(self.unary("log", F::ln, |x, _| F::one() / x))
    }

    /// Square root; negative inputs are rejected.
    pub fn sqrt(&self) -> Result<Tensor<F>> {
        self.check_nonnegative("sqrt")?;
        Ok(self.unary("sqrt", F::sqrt, |_, y| F::of(0.5) / y))
    }

    /// Elementwise `x^p`. Negative bases need an integer exponent.
    pub fn pow(&self, p: f64) -> Result<Tensor<F>> {
        if p.fract() != 0.0 {
            self.check_nonnegative("pow")?;
        }
        let pf = F::of(p);
        Ok(self.unary("pow", move |x| x.powf(pf), move |x, _| pf * x.powf(pf - F::one())))
    }

    fn check_nonnegative(&self, op: &'static str) -> Result<()> {
        match self.values().iter().position(|&v| v < F::zero()) {
            Some(index) => Err(TensorError::Domain {
                op,
                index,
                value: self.values()[index].f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary("sigmoid", sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            "relu",
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::of((2.0 / std::f64::consts::PI).sqrt());
        let k = F::of(0.044715);
        let half = F::of(0.5);
        self.unary(
            "gelu",
            move |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (F::one() + t)
                    + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
            },
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary("tanh", F::tanh, |_, y| F::one() - y * y)
    }

    pub fn abs(&self) -> Tensor<F> {
        self.unary("abs", F::abs, |x, _| {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor<F> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// `ln σ(x)`, evaluated stably.
    pub fn log_sigmoid(&self) -> Tensor<F> {
        self.unary("log_sigmoid", |x| -softplus(-x), |x, _| sigmoid(-x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<F> {
        let s = self.values().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = F::of(self.numel() as f64);
        self.sum().scale(F::one() / n)
    }

    fn axis_split(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        Ok((outer, shape[axis], inner))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let (outer, len, inner) = self.axis_split("sum_axis", axis)?;
        let x = self.values();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let mut g = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        g[base..base + inner].copy_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let len = F::of(self.axis_split("mean_axis", axis)?.1 as f64);
        Ok(self.sum_axis(axis)?.scale(F::one() / len))
    }

    fn last_dim(&self) -> (usize, usize) {
        let d = *self.shape().last().expect("rank >= 1");
        (self.numel() / d, d)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<F> {
        let (rows, d) = self.last_dim();
        let x = self.values();
        let mut out = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let o = &mut out[r * d..(r + 1) * d];
            let mut s = F::zero();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - m).exp();
                s += *oi;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let (y, g) = (args.out, args.grad);
                let mut gx = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dotp: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&self, eps: f64) -> Tensor<F> {
        let (rows, d) = self.last_dim();
        let x = self.values();
        let eps = F::of(eps);
        let df = F::of(d as f64);
        let mut out = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs;
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let (y, g) = (args.out, args.grad);
                let mut gx = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mg = gr.iter().copied().sum::<F>() / df;
                    let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / df;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2-D matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (a, b) => return Err(mismatch("matmul", a, b)),
        };
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, k, n, self.values(), other.values(), &mut out);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let (a, b, g) = (args.inputs[0].values(), args.inputs[1].values(), args.grad);
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![F::zero(); m * k];
                    gemm_nt(m, n, k, g, b, &mut ga);
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![F::zero(); k * n];
                    gemm_tn(k, m, n, a, g, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `[m,k]·[n,k]ᵀ`, the attention-score product.
    pub fn matmul_t(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            (a, b) => return Err(mismatch("matmul_t", a, b)),
        };
        let mut out = vec![F::zero(); m * n];
        gemm_nt(m, k, n, self.values(), other.values(), &mut out);
        Ok(Tensor::from_op(
            "matmul_t",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let (a, b, g) = (args.inputs[0].values(), args.inputs[1].values(), args.grad);
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![F::zero(); m * k];
                    gemm_nn(m, n, k, g, b, &mut ga);
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![F::zero(); n * k];
                    gemm_tn(n, m, k, g, a, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = match self.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("expected a matrix, got shape {s:?}"),
                })
            }
        };
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            transpose_buf(r, c, self.values()),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| vec![Some(transpose_buf(c, r, args.grad))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, F>| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let (outer, full, inner) = self.axis_split("slice", axis)?;
        if len == 0 || start + len > full {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} out of bounds for extent {full}", start + len),
            });
        }
        let x = self.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "slice",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let mut g = vec![F::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (outer, _, inner) = first.axis_split("concat", axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let same_rank = p.shape().len() == first.shape().len();
            let compatible = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
            lens.push(p.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.values()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            parts.to_vec(),
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let mut grads: Vec<Vec<F>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        gi.extend_from_slice(&args.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.needs)
                    .map(|(g, &need)| need.then_some(g))
                    .collect()
            }),
        ))
    }

    /// Gathers rows (entries of axis 0); indices may repeat.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor<F>> {
        let n = self.shape()[0];
        let row = self.numel() / n;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: format!("row {bad} out of range for {n} rows"),
            });
        }
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: "empty index list".into(),
            });
        }
        let x = self.values();
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            out.extend_from_slice(&x[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            "index_rows",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let mut g = vec![F::zero(); n * row];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..row {
                        g[r * row + j] += args.grad[k * row + j];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Unfolds `[H, W, C]` into convolution patches `[Ho·Wo, k·k·C]` (zero padding).
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<F>> {
        let (h, w, c) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(TensorError::Invalid {
                    op: "im2col",
                    msg: format!("expected [H, W, C], got {s:?}"),
                })
            }
        };
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return Err(TensorError::Invalid {
                op: "im2col",
                msg: format!("kernel {kernel} does not fit {h}x{w} with padding {pad}"),
            });
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * c;
        let x = self.values();
        let mut out = vec![F::zero(); ho * wo * cols];
        let geom = move |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = (oy * stride + ky) as isize - pad as isize;
            let ix = (ox * stride + kx) as isize - pad as isize;
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                .then(|| (iy as usize * w + ix as usize) * c)
        };
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * cols;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        if let Some(src) = geom(oy, ox, ky, kx) {
                            let dst = row + (ky * kernel + kx) * c;
                            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "im2col",
            vec![ho * wo, cols],
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, F>| {
                let mut g = vec![F::zero(); h * w * c];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let row = (oy * wo + ox) * cols;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                if let Some(src) = geom(oy, ox, ky, kx) {
                                    let from = row + (ky * kernel + kx) * c;
                                    for ch in 0..c {
                                        g[src + ch] += args.grad[from + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<F> {
        let (lo, hi) = (F::of(lo), F::of(hi));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { F::one() } else { F::zero() },
        )
    }

    /// Elementwise `max(self, other)` built from differentiable primitives.
    pub fn maximum(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        other.add(&self.sub(other)?.relu())
    }

    /// Elementwise `min(self, other)` built from differentiable primitives.
    pub fn minimum(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.sub(&self.sub(other)?.relu())
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn transpose_buf<F: Real>(r: usize, c: usize, x: &[F]) -> Vec<F> {
    let mut t = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}
