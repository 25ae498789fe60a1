use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab: tensor math, data decoding,
/// training, measurement and sweep orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("convolution geometry: {0}")]
    ConvGeometry(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch of {got} samples is too small, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("bad length: {0}")]
    BadLength(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown tap `{0}` (expected conv1, res2, res4 or head)")]
    UnknownTap(String),

    #[error("layer `{0}` has no weights")]
    NoWeights(String),

    #[error("malformed records file: {0}")]
    Records(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
