//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the decision stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value fed to an operation is outside its documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A frame stream violated ordering or identity rules.
    #[error("stream error: {0}")]
    Stream(String),

    /// Training labels are malformed or misaligned.
    #[error("label error: {0}")]
    Label(String),

    /// A numeric computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training could not proceed (divergence, bad gradients).
    #[error("training error: {0}")]
    Training(String),

    /// Dataset contents are inconsistent with their manifest or annotations.
    #[error("data error: {0}")]
    Data(String),

    /// Threshold calibration could not be performed.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Configuration is invalid or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (checkpoint, episode file, manifest) is corrupt
    /// or has an unrecognized version.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) | Error::Training(_) => 3,
            _ => 2,
        }
    }
}
