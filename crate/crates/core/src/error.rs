//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by taxonomy handling, data generation, training, and the
/// experiment harness.
#[derive(Error, Debug)]
pub enum Error {
    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("hierarchy inference error: {0}")]
    HierInfer(String),

    #[error("data generation error: {0}")]
    Data(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
