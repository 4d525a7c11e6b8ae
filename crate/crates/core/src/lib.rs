//! Desk-scale laboratory for universal test-time backdoor attacks on a toy
//! multimodal model.
//!
//! The crate is built in layers:
//!
//! * [`tensor`] — dense tensors, a reverse-mode autodiff tape, an
//!   orthonormal 2-D DCT pair and the `TCT1` on-disk format;
//! * [`model`] — a byte-level vision–language transformer small enough to
//!   train on a laptop CPU, plus its synthetic shapes/colors VQA data;
//! * [`perturb`] — masked universal image perturbations (full-image,
//!   corner patches, border frame) and their artifact format;
//! * [`attack`] — the trigger/target optimization loop: sign-based updates
//!   with ℓ₁-normalized momentum over a dual-objective loss;
//! * [`metrics`] — exact match, containment, BLEU@4, ROUGE-L;
//! * [`eval`] — the held-out evaluation protocol and its report;
//! * [`robustness`] — image corruptions and drifting frame sequences.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the default precision used by the pipeline.

pub mod attack;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod ppm;
pub mod rng;
pub mod robustness;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{GradMap, NodeId, Tape, Tensor};

/// Default element type of the pipeline (matches the on-disk format).
pub type Real = f32;

/// A tensor in the default precision.
pub type RealTensor = Tensor<Real>;

/// The toy model in the default precision.
pub type RealModel = model::ToyMllm<Real>;
