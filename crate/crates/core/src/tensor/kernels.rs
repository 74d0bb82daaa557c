//! Row-major matrix-product kernels. All of them accumulate into `out`.

use super::Real;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    F::gemm(m, k, n, a, [k as isize, 1], b, [n as isize, 1], out);
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    F::gemm(m, k, n, a, [k as isize, 1], b, [1, k as isize], out);
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    F::gemm(m, k, n, a, [1, m as isize], b, [n as isize, 1], out);
}
