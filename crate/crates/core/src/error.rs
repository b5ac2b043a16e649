use std::io;

use thiserror::Error;

pub type Result<T, E = DattaError> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum DattaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("domain {domain} is assigned to both the source and the target group")]
    DomainOverlap { domain: u16 },

    #[error("domain {domain} has no split assignment")]
    UnassignedDomain { domain: u16 },

    #[error("unknown domain {domain} in sequence specification")]
    UnknownDomain { domain: u16 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Preprocess(#[from] crate::data::PreprocessError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
