//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor operations, model construction, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar was required (e.g. a loss) but a higher-rank tensor was given.
    #[error("rank error: {0}")]
    Rank(String),

    /// A value fell outside the domain an operation requires
    /// (binary {{0,1}}, ternary {{-1,0,1}}, non-negative, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Batch-norm evaluated before any training step populated statistics.
    #[error("uninitialized statistics: {0}")]
    UninitializedStats(String),

    /// `backward` called again without resetting gradients.
    #[error("backward already run on this tape; reset gradients first")]
    BackwardAlreadyRun,

    /// A file or byte stream did not match its declared format.
    /// `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Structurally valid data with out-of-range content (e.g. a label
    /// outside the declared class count).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint and configuration (or dataset) do not describe the
    /// same model.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
