use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown class id {0}")]
    UnknownClass(u8),

    #[error("invalid class table: {0}")]
    ClassTable(String),

    #[error("invalid voxel spacing ({0}, {1}, {2}): components must be finite and > 0")]
    Spacing(f64, f64, f64),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("undefined Dice: every channel is empty in both inputs")]
    UndefinedDice,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid parameter {name}: {message}")]
    Parameter { name: &'static str, message: String },

    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleSize(usize),

    #[error("missing cases: {}", .0.join(", "))]
    MissingCases(Vec<String>),

    #[error("inconsistent class tables across cases")]
    InconsistentClassTables,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: line {line}: field {field}: {message}")]
    Header {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}: declared payload is {expected} bytes but raw file holds {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported element type {0}")]
    ElementType(String),

    #[error("{path}: line {line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("duplicate case id {0}")]
    DuplicateCase(String),

    #[error("phantom primitive {index} out of bounds: {message}")]
    PrimitiveOutOfBounds { index: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
