//! Central finite-difference checks of analytic gradients.

use super::{Real, Result, Tensor};

/// A scalar-valued function of one tensor that can be evaluated at any precision.
///
/// Implementors let a single definition be differentiated in `f32` and
/// finite-differenced in `f64`.
pub trait ScalarFn {
    fn eval<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>>;
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn central_difference(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    shape: &[usize],
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = orig - h;
        let down = f(&Tensor::new(shape, probe.clone())?)?.item();
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)` for `f` at `x`.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "step must be positive");
    let leaf = Tensor::param(x.shape(), x.values().to_vec())?;
    let y = f(&leaf)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = central_difference(&f, x.shape(), x.values(), h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Like [`grad_check`] with the analytic gradient computed in precision `F`
/// and the finite differences in `f64`.
pub fn grad_check_in<F: Real, G: ScalarFn>(f: &G, shape: &[usize], x: &[f64], h: f64) -> Result<f64> {
    assert!(h > 0.0, "step must be positive");
    let leaf = Tensor::<F>::param(shape, x.iter().map(|&v| F::of(v)).collect())?;
    let y = f.eval(&leaf)?;
    y.backward()?;
    let analytic: Vec<f64> = leaf
        .grad()
        .map(|g| g.iter().map(|v| v.f64()).collect())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = central_difference(|t| f.eval(t), shape, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
