//! Differentiable data augmentation for contrastive sentence
//! representation learning, at desk scale.
//!
//! The crate trains a small from-scratch transformer encoder whose
//! attention layers can consume trainable key/value prefix rows (or
//! Adapter / LoRA modules) acting as a learned augmentation pair. Two
//! augmentation modules produce two views of each sentence; a
//! two-stage recipe first tunes the modules on synthetic NLI pairs
//! with the encoder frozen, then tunes modules and encoder jointly
//! with a contrastive objective. Compatibility diagnostics
//! (representation divergence, weight convergence, softmax-Jacobian
//! saturation, layer-variance gaps) instrument why the staging
//! matters.
//!
//! Entry points:
//! - [`corpus`] — synthetic NLI/STS corpora and Spearman correlation
//! - [`encoder`] — the miniature transformer with prefix attention
//! - [`pe`] — prefix / Adapter / LoRA augmentation module pairs
//! - [`losses`] — contrastive, supervised-contrastive, siamese CE
//! - [`diagnostics`] — δ/κ instrumentation and saturation reports
//! - [`pipeline`] — two-stage trainer, schedules, checkpoints, sweeps
//! - [`cli`] — the `diffaug` binary's subcommands
//!
//! The `examples/` directory has one runnable program per capability.

pub mod audit;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod losses;
pub mod params;
pub mod pe;
pub mod pipeline;

pub(crate) mod seeds;

use thiserror::Error;

/// Crate-wide error type. [`cli::run_cli`] maps `Config` to exit code
/// 1 and everything else to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] ndauto::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
