//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The graph is define-by-run: every operation appends a node to a [`Tape`]
//! and returns a [`NodeId`]. Calling [`Tape::backward`] on a scalar root
//! fills a gradient slot per node; a tape can be walked backward exactly
//! once. The op set is closed and small on purpose, large enough for a
//! FiLM-modulated MLP and the losses built on top of it, nothing more.
//!
//! Everything is `f64`. Non-finite values are rejected when literals enter
//! the tape; values produced by arithmetic are allowed to go non-finite and
//! are caught by the consumers that care (solvers, the training loop).

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tensor::matvec_data;

use thiserror::Error;

/// Errors for tensor construction, graph building, and gradient checking.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tensor data has {actual} elements but shape implies {expected}")]
    ShapeDataMismatch { expected: usize, actual: usize },
    #[error("non-finite literal {value} at index {index}")]
    NonFiniteLiteral { index: usize, value: f64 },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {actual:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        actual: Vec<usize>,
    },
    #[error("slice [{start}, {start}+{len}) out of bounds for vector of length {size}")]
    SliceBounds { start: usize, len: usize, size: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("mean_sq of an empty tensor")]
    EmptyReduce,
    #[error("non-finite scale factor {0}")]
    NonFiniteScale(f64),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward was already called on this tape")]
    BackwardTwice,
    #[error("gradients requested before backward")]
    BackwardNotRun,
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("non-finite value during gradient check: {0}")]
    NonFiniteCheck(String),
    #[error("gradient has {actual} entries for {expected} parameters")]
    GradLen { expected: usize, actual: usize },
}
