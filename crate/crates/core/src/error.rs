//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: axis {axis} out of range or empty for shape {shape}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: String,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("invalid control code: {0}")]
    InvalidCode(String),
    #[error("scene error: {0}")]
    Scene(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }
}
