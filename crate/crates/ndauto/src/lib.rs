//! Dense f64 tensor arithmetic with tape-based reverse-mode automatic
//! differentiation, a bias-corrected Adam optimizer, and a
//! finite-difference gradient checker.
//!
//! Sixty-four-bit floats are used throughout: the models built on top
//! of this crate are small, and full precision keeps gradient checks
//! sharp. Gradients accumulate additively within one tape; each
//! training step records a fresh tape and pulls leaf gradients back
//! into its persistent parameter tensors.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, DEFAULT_STEP};
pub use tape::{cosine_sim, NodeId, Tape};
pub use tensor::{cosine_similarity, softmax_slice, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and the
/// gradient checker.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}")]
    Domain(String),
    #[error("gradient check aborted, function is not deterministic: {0}")]
    NonDeterministic(String),
}
