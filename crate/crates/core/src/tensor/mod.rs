//! Dense row-major tensors and the reverse-mode tape that differentiates
//! computations built from them.

mod dct;
mod io;
mod tape;

pub use dct::{dct2, idct2, DctBasis};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, TCT1_MAGIC};
pub use tape::{GradMap, NodeId, Tape};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major tensor. `requires_grad` marks it as a trainable leaf
/// when it is registered on a [`Tape`]; it has no effect on pure math.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting any mismatch between shape and data length.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::BadConstruction {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Element-wise construction from the flat (row-major) index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product::<usize>();
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf (builder style).
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interprets the tensor as a matrix (rank 2), or fails with the name of
    /// the operation that needed one.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for the empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Sum of absolute entries.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs().as_f64()).sum()
    }

    /// Converts the element type, going through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
