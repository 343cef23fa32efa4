// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, FvError>;

#[derive(Debug, Error)]
pub enum FvError {
    /// Shape or dimension mismatch between tensors or against a model config.
    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or infinity was produced or supplied. Never propagated.
    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Token ids, vocabulary, or prompt construction problems.
    #[error("token error: {0}")]
    Token(String),

    /// Invalid argument outside shape errors (bad layer, bad k, empty set, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Malformed input data files (word pairs, lexicon exports).
    #[error("data format error: {0}")]
    Data(String),

    /// Checkpoint or function-vector file problems.
    #[error("file format error: {0}")]
    Format(String),

    /// Run configuration problems (schema violations, unknown keys).
    #[error("config error: {0}")]
    Config(String),

    /// A required upstream artifact is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Training diverged (loss became non-finite).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FvError {
    pub fn shape(msg: impl Into<String>) -> Self {
        FvError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        FvError::Invalid(msg.into())
    }
}
