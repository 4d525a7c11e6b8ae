//! Orthonormal 2-D discrete cosine transform (type II and its inverse).
//!
//! The transform is expressed through dense basis matrices so it can also be
//! replayed on a [`Tape`](super::Tape) as two matrix products with constant
//! operands — that is how the spectrum-level augmentation stays
//! differentiable.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// The orthonormal type-II DCT basis for one axis length: `C[k][j] =
/// α_k · cos(π(2j+1)k / 2n)` with `α_0 = √(1/n)`, `α_k = √(2/n)`.
/// Rows are orthonormal, so the inverse transform is the transpose.
#[derive(Clone)]
pub struct DctBasis<S> {
    n: usize,
    c: Tensor<S>,
}

impl<S: Scalar> DctBasis<S> {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "DCT basis needs a positive length");
        let a0 = (1.0 / n as f64).sqrt();
        let ak = (2.0 / n as f64).sqrt();
        let c = Tensor::from_fn(vec![n, n], |flat| {
            let k = flat / n;
            let j = flat % n;
            let alpha = if k == 0 { a0 } else { ak };
            let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64;
            S::of_f64(alpha * angle.cos())
        });
        DctBasis { n, c }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// The basis matrix `C` (`[n,n]`, row-major).
    pub fn matrix(&self) -> &Tensor<S> {
        &self.c
    }
}

fn expect_hw<S: Scalar>(
    op: &'static str,
    x: &Tensor<S>,
    bh: &DctBasis<S>,
    bw: &DctBasis<S>,
) -> Result<(usize, usize)> {
    let (h, w) = x.dims2(op)?;
    if h != bh.n || w != bw.n {
        return Err(Error::shape(
            op,
            format!("input is [{h}, {w}] but bases cover [{}, {}]", bh.n, bw.n),
        ));
    }
    Ok((h, w))
}

/// Forward 2-D DCT: `Y = C_h · X · C_wᵀ`.
pub fn dct2<S: Scalar>(x: &Tensor<S>, bh: &DctBasis<S>, bw: &DctBasis<S>) -> Result<Tensor<S>> {
    let (h, w) = expect_hw("dct2", x, bh, bw)?;
    let mut t = vec![S::zero(); h * w];
    S::gemm(h, h, w, bh.c.data(), h as isize, 1, x.data(), w as isize, 1, S::zero(), &mut t, w as isize, 1);
    let mut y = vec![S::zero(); h * w];
    // X·C_wᵀ via swapped strides on C_w.
    S::gemm(h, w, w, &t, w as isize, 1, bw.c.data(), 1, w as isize, S::zero(), &mut y, w as isize, 1);
    Tensor::new(vec![h, w], y)
}

/// Inverse 2-D DCT: `X = C_hᵀ · Y · C_w`.
pub fn idct2<S: Scalar>(y: &Tensor<S>, bh: &DctBasis<S>, bw: &DctBasis<S>) -> Result<Tensor<S>> {
    let (h, w) = expect_hw("idct2", y, bh, bw)?;
    let mut t = vec![S::zero(); h * w];
    // C_hᵀ·Y via swapped strides on C_h.
    S::gemm(h, h, w, bh.c.data(), 1, h as isize, y.data(), w as isize, 1, S::zero(), &mut t, w as isize, 1);
    let mut x = vec![S::zero(); h * w];
    S::gemm(h, w, w, &t, w as isize, 1, bw.c.data(), w as isize, 1, S::zero(), &mut x, w as isize, 1);
    Tensor::new(vec![h, w], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, uniform_f64};

    /// Textbook double-sum definition, kept deliberately naive.
    fn dct2_naive(x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = x.dims2("naive").unwrap();
        Tensor::from_fn(vec![h, w], |flat| {
            let u = flat / w;
            let v = flat % w;
            let au = if u == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
            let av = if v == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
            let mut acc = 0.0;
            for j in 0..h {
                for i in 0..w {
                    let cj = (std::f64::consts::PI * (2 * j + 1) as f64 * u as f64 / (2 * h) as f64).cos();
                    let ci = (std::f64::consts::PI * (2 * i + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    acc += x.data()[j * w + i] * cj * ci;
                }
            }
            au * av * acc
        })
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, "dct-test");
        Tensor::from_fn(vec![h, w], |_| uniform_f64(&mut rng, 0.0, 1.0))
    }

    #[test]
    fn basis_rows_are_orthonormal() {
        let b = DctBasis::<f64>::new(16);
        let c = b.matrix();
        for k in 0..16 {
            for l in 0..16 {
                let dot: f64 = (0..16).map(|j| c.data()[k * 16 + j] * c.data()[l * 16 + j]).sum();
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "rows {k},{l}: {dot}");
            }
        }
    }

    #[test]
    fn matrix_form_matches_double_sum_definition() {
        let x = random_image(8, 8, 11);
        let bh = DctBasis::new(8);
        let y = dct2(&x, &bh, &bh).unwrap();
        let naive = dct2_naive(&x);
        for (a, b) in y.data().iter().zip(naive.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn rectangular_inputs_round_trip() {
        let x = random_image(8, 12, 5);
        let bh = DctBasis::new(8);
        let bw = DctBasis::new(12);
        let y = dct2(&x, &bh, &bw).unwrap();
        let back = idct2(&y, &bh, &bw).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_within_f32_tolerance() {
        let x = random_image(64, 64, 3).cast::<f32>();
        let b = DctBasis::<f32>::new(64);
        let y = dct2(&x, &b, &b).unwrap();
        let back = idct2(&y, &b, &b).unwrap();
        for (a, v) in x.data().iter().zip(back.data()) {
            assert!((a - v).abs() < 1e-4, "{a} vs {v}");
        }
    }

    #[test]
    fn constant_image_concentrates_in_dc_coefficient() {
        let c = 0.4;
        let x = Tensor::<f64>::full(vec![16, 16], c);
        let b = DctBasis::new(16);
        let y = dct2(&x, &b, &b).unwrap();
        assert!((y.data()[0] - c * 16.0).abs() < 1e-10); // c·√(h·w)
        for v in &y.data()[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_against_basis_is_rejected() {
        let x = Tensor::<f32>::zeros(vec![8, 8]);
        let b16 = DctBasis::new(16);
        let b8 = DctBasis::new(8);
        assert!(dct2(&x, &b16, &b8).is_err());
    }
}
