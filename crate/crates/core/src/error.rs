use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("pair ({0}, {1}) references a row outside a batch of {2}")]
    PairOutOfRange(usize, usize, usize),

    #[error("sample {index}: {msg}")]
    Sample { index: usize, msg: String },

    #[error("chain infeasible: {0}")]
    ChainInfeasible(String),

    #[error("invalid annotation for `{image_id}`: {msg}")]
    Annotation { image_id: String, msg: String },

    #[error("invalid rectangle: {0}")]
    Rect(String),

    #[error("insufficient {what}: required {required}, available {available}")]
    Insufficient { what: &'static str, required: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("missing annotations for images: {0:?}")]
    MissingAnnotations(Vec<String>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
