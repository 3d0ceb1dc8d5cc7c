use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a documented constraint.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Inputs disagree on shape (rows, columns, token counts).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An artifact (calibration map, merge plan) does not match the run it is used with.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// A numeric precondition failed, e.g. an attention map that is not row-stochastic.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
