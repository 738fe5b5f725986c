//! Error type shared by every module in the crate.
//!
//! The variants are deliberately coarse: callers match on the *kind* of
//! failure (shape clash, bad knob, broken invariant, file damage), while the
//! payload carries enough detail to be quoted in a bug report verbatim.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong below the CLI layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    /// Both shapes are always reported.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar knob is outside its legal range (temperature, step size,
    /// probability, ...).
    #[error("invalid parameter {name}: {message}")]
    Param {
        name: &'static str,
        message: String,
    },

    /// An index (token id, target class, row, pool entry) is out of range.
    #[error("index out of range in {what}: got {got}, limit {limit}")]
    Index {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// A caller broke a documented invariant (non-scalar loss backward,
    /// pool/edit mismatch, double extension, missing zero entry, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A sequence is longer than the model's configured window.
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Capacity { len: usize, max: usize },

    /// The synthetic-world generator could not satisfy a constraint.
    /// The message names the constraint that failed.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A serialized artifact is damaged or belongs to a different model:
    /// bad magic, unsupported version, fingerprint mismatch, truncation.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// A loss or parameter became NaN/Inf; the step is aborted.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::Param`].
    pub fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::Param {
            name,
            message: message.into(),
        }
    }

    /// Shorthand for [`Error::Contract`].
    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}
