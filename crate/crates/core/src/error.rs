use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for vocabulary of {vocab}")]
    LabelOutOfRange { label: u32, vocab: usize },
    #[error("negatives overlap batch positives (label {0})")]
    NegativeOverlapsPositive(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("unsupported version {0}")]
    VersionMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("output directory already exists: {0}")]
    OutputCollision(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
