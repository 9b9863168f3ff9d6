//! Floating-point element type shared by tensors, the graph and the optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Real scalar stored in tensors. Implemented for `f64` (the default, needed
/// for gradient checks) and `f32` (faster training runs).
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Short name used in configs and checkpoint manifests.
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
    ///
    /// `a` is `m x k` (stored `k x m` when `trans_a`), `b` is `k x n`
    /// (stored `n x k` when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, col stride) of the logical matrix
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer");
                assert_eq!(c.len(), m * n, "gemm: output buffer");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for x in c.iter_mut() {
                        *x *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: buffer lengths are checked above and the strides
                // describe dense row-major (or transposed) layouts within them.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f64, "f64", matrixmultiply::dgemm);
impl_real!(f32, "f32", matrixmultiply::sgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lhs = if ta { &at } else { &a };
            let rhs = if tb { &bt } else { &b };
            let mut c = vec![f64::NAN; m * n];
            f64::gemm(m, k, n, lhs, ta, rhs, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_unit_beta() {
        let mut c = vec![1.0f32; 4];
        f32::gemm(2, 1, 2, &[1.0, 2.0], false, &[3.0, 4.0], false, 1.0, &mut c);
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
    }
}
