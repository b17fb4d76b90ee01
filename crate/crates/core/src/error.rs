use std::io;

use thiserror::Error;

/// Errors produced anywhere in the attack and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("loss references proposal {index} but the forward pass produced {len}")]
    MissingProposal { index: usize, len: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("target search exceeded {0} steps")]
    StepCapReached(usize),

    #[error("unsupported detector: {0}")]
    UnsupportedDetector(String),

    #[error("direction mismatch: {0}")]
    DirectionMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
