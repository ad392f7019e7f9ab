use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation or the record they are bound to.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A node produced NaN or an infinity.
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    /// Caller-supplied data violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error("set-point calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
