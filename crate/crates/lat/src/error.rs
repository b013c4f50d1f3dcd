//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LatError>;

#[derive(Debug, Error)]
pub enum LatError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input is valid in form but degenerate in content (empty batch,
    /// fully masked softmax, zero objects, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation produced a NaN or infinite value.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A caller violated an API contract (non-scalar loss, repeated
    /// backward, missing gradient, bad token sequence, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Text input (embedding file, config, dataset, checkpoint) failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Synthetic-world generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LatError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LatError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
