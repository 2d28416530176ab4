use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("{op}: batch size {batch} is too small (need at least {min})")]
    BatchSize { op: &'static str, batch: usize, min: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("training diverged: non-finite {what} at step {step}")]
    Divergence { step: usize, what: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown config key `{key}`{}", suggestion_suffix(.suggestion))]
    UnknownKey { key: String, suggestion: Option<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Empty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn suggestion_suffix(s: &Option<String>) -> String {
    match s {
        Some(k) => format!(" (did you mean `{k}`?)"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
