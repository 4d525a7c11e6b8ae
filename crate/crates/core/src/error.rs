//! Error surface of the core crate.

use thiserror::Error;

/// Anything the numeric core, the toy model or the attack loop can reject.
#[derive(Debug, Error)]
pub enum Error {
    /// A forward op was handed operands whose shapes do not fit together.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Tensor construction with a data length that contradicts the shape.
    #[error("tensor of shape {shape:?} needs {expected} elements, got {got}")]
    BadConstruction {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    /// `backward` was asked to differentiate a non-scalar value.
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A token or index outside the addressable range.
    #[error("index {index} out of range ({what} has {len} entries)")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// A token sequence that does not fit the model's text context window.
    #[error("sequence of {len} tokens exceeds the text context of {ctx}")]
    ContextOverflow { len: usize, ctx: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    /// The attack loop produced a non-finite loss.
    #[error("attack diverged: non-finite loss at iteration {step} (last finite loss {last_finite})")]
    AttackDiverged { step: usize, last_finite: f64 },

    /// The attack gradient was exactly zero for too many consecutive steps.
    #[error("attack stalled: zero gradient for {count} consecutive iterations (last at {step})")]
    GradientStalled { step: usize, count: usize },

    /// A perturbation budget that does not fit the image geometry.
    #[error("invalid perturbation budget: {0}")]
    InvalidBudget(String),

    /// Evaluation refused to run because ensemble and eval samples overlap.
    #[error("evaluation set overlaps the attack ensemble: {count} shared ids (e.g. {example})")]
    OverlappingSplits { count: usize, example: u64 },

    /// An input collection that must be non-empty was empty.
    #[error("empty {0}")]
    Empty(&'static str),

    /// Underlying filesystem failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A file that exists but does not parse as the expected format.
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for shape complaints so call sites stay on one line.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }
}
