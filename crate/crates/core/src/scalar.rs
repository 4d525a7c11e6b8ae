//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code can run in `f32` (the default, matching the on-disk tensor format)
//! or `f64` (useful for finite-difference gradient checks, where single
//! precision runs out of headroom). The trait also carries a `gemm` hook so
//! the two concrete types can route matrix products through
//! `matrixmultiply`'s tuned kernels instead of a naive triple loop.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of all tensors in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, the type every RNG stream and config knob uses.
    fn of_f64(x: f64) -> Self;

    /// Widens to `f64` for accumulation, logging and serialization.
    fn as_f64(self) -> f64;

    /// Converts from `f32`, the on-disk tensor element type.
    fn of_f32(x: f32) -> Self;

    /// Narrows to `f32` for the on-disk tensor format.
    fn as_f32(self) -> f32;

    /// `C ← A·B + beta·C` over row-major buffers with explicit strides.
    ///
    /// Strides are in elements and must be non-negative; the corner element
    /// of each operand must lie inside its slice. The default implementation
    /// is a plain triple loop; `f32`/`f64` override it with `matrixmultiply`.
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
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for l in 0..k {
                    let av = a[(i as isize * rsa + l as isize * csa) as usize];
                    let bv = b[(l as isize * rsb + j as isize * csb) as usize];
                    acc = acc + av * bv;
                }
                let cidx = (i as isize * rsc + j as isize * csc) as usize;
                c[cidx] = acc + beta * c[cidx];
            }
        }
    }
}

/// Panics unless every corner element addressed by the stride pattern lands
/// inside its buffer. Keeps the unsafe `matrixmultiply` calls sound.
fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    alen: usize,
    rsa: isize,
    csa: isize,
    blen: usize,
    rsb: isize,
    csb: isize,
    clen: usize,
    rsc: isize,
    csc: isize,
) {
    assert!(
        rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0,
        "gemm strides must be non-negative"
    );
    let corner = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    if k > 0 {
        assert!(corner(m, k, rsa, csa) < alen, "gemm: lhs stride pattern out of bounds");
        assert!(corner(k, n, rsb, csb) < blen, "gemm: rhs stride pattern out of bounds");
    }
    assert!(corner(m, n, rsc, csc) < clen, "gemm: out stride pattern out of bounds");
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }

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
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            scale_output(m, n, beta, c, rsc, csc);
            return;
        }
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: bounds of every corner element were just checked, strides
        // are non-negative, and the buffers are distinct borrows.
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
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }

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
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            scale_output(m, n, beta, c, rsc, csc);
            return;
        }
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: see the f32 implementation.
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
                csc,
            );
        }
    }
}

fn scale_output<S: Scalar>(m: usize, n: usize, beta: S, c: &mut [S], rsc: isize, csc: isize) {
    for i in 0..m {
        for j in 0..n {
            let idx = (i as isize * rsc + j as isize * csc) as usize;
            c[idx] = beta * c[idx];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.19).cos()).collect();
        let mut c = vec![0.0f32; m * n];
        f32::gemm(m, k, n, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        let want = naive(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn gemm_transposed_strides_compute_at_b() {
        // A^T·B expressed by swapping A's strides instead of materializing.
        let (m, k, n) = (3, 4, 2);
        let a_t: Vec<f64> = (0..k * m).map(|i| i as f64 * 0.5 - 2.0).collect(); // stored k×m
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sqrt()).collect();
        let mut c = vec![0.0f64; m * n];
        f64::gemm(m, k, n, &a_t, 1, m as isize, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for l in 0..k {
                    want += a_t[l * m + i] * b[l * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_k_zero_only_scales_output() {
        let mut c = vec![2.0f32, 4.0];
        f32::gemm(1, 0, 2, &[], 1, 1, &[], 1, 1, 0.5, &mut c, 2, 1);
        assert_eq!(c, vec![1.0, 2.0]);
    }

    #[test]
    fn gemm_beta_accumulates_into_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, 2, 1, &b, 1, 1, 1.0, &mut c, 1, 1);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }
}
