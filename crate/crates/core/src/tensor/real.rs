use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point element type a [`Tensor`](super::Tensor) can hold.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    /// Short type name used in diagnostics.
    const NAME: &'static str;
    /// `c[m,n] += a[m,k] · b[k,n]` over strided row-major views; `c` is contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: [isize; 2], b: &[Self], b_strides: [isize; 2], c: &mut [Self]);
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], [rsa, csa]: [isize; 2], b: &[Self], [rsb, csb]: [isize; 2], c: &mut [Self]) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
        assert!(b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
        // SAFETY: the asserts above keep every strided access in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], [rsa, csa]: [isize; 2], b: &[Self], [rsb, csb]: [isize; 2], c: &mut [Self]) {
        assert!(c.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
        assert!(b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
        // SAFETY: the asserts above keep every strided access in bounds.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
