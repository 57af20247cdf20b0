use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing image file for sample `{id}`: {path}")]
    MissingImage { id: String, path: PathBuf },

    #[error("grade out of range at row {row}: {value}")]
    GradeOutOfRange { row: usize, value: i64 },

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },

    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),

    #[error("training protocol violation: {0}")]
    Protocol(String),

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metric input error: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
