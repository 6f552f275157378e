//! Scalar abstraction and dense row-major matrix kernels.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point type the engine computes in.
pub trait Real:
    Float + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * op(A) * op(B) + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );
}

macro_rules! check_extent {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr) => {
        if $m > 0 && $k > 0 {
            let last = ($m as isize - 1) * $rsa + ($k as isize - 1) * $csa;
            assert!((last as usize) < $a.len(), "gemm: A too short");
        }
        if $k > 0 && $n > 0 {
            let last = ($k as isize - 1) * $rsb + ($n as isize - 1) * $csb;
            assert!((last as usize) < $b.len(), "gemm: B too short");
        }
        if $m > 0 && $n > 0 {
            assert!(
                (($m as isize - 1) * $rsc) as usize + $n <= $c.len(),
                "gemm: C too short"
            );
        }
    };
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        f64::from(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
    ) {
        check_extent!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc);
        // SAFETY: extents checked above; C is row-major m x n.
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
    ) {
        check_extent!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc);
        // SAFETY: extents checked above; C is row-major m x n.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                1,
            );
        }
    }
}

/// `C (m x n) = A (m x k) * B (k x n)`, overwriting C.
pub fn matmul<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, F::zero(), c, n as isize);
}

/// `C += A * B`.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, F::one(), c, n as isize);
}

/// `C (m x n) += A^T * B` where A is `k x m` and B is `k x n`.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, F::one(), c, n as isize);
}

/// `C (m x n) = A * B^T` where A is `m x k` and B is `n x k`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, F::zero(), c, n as isize);
}

/// `C += A * B^T`.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, F::one(), c, n as isize);
}

pub fn convert<A: Real, B: Real>(xs: &[A]) -> Vec<B> {
    xs.iter().map(|x| B::of(x.f64())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut c2 = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut c3 = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c3, m, k, n);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
