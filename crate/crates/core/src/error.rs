use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("element {index} has value {value}, expected -1 or +1")]
    NotBinary { index: usize, value: f32 },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("invalid block spec: {0}")]
    Block(String),

    #[error("invalid network spec: {0}")]
    Network(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward called without a recorded training forward pass")]
    NoForward,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error (record {record:?}): {msg}")]
    Data { record: Option<usize>, msg: String },

    #[error("image decode error for {path:?}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("model file: {0}")]
    Format(String),

    #[error("model file checksum mismatch")]
    Checksum,

    #[error("numerical abort at epoch {epoch}: {msg}")]
    Numerical { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn data(record: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data { record, msg: msg.into() }
    }
}
