use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the pipeline.
///
/// `class()` gives a stable, machine-parsable name for each variant; the CLI
/// prints it as the first token of its one-line failure message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("empty table: {0}")]
    EmptyTable(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing proxy for item {item_id} (variant {variant})")]
    MissingProxy { item_id: u32, variant: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("duplicate item id {0} within one write")]
    Duplicate(u32),

    #[error("artifact hash mismatch: {0}")]
    HashMismatch(String),

    #[error("missing upstream artifact {path}; run `{producer}` first")]
    Dependency { path: PathBuf, producer: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            Error::Config { .. } => "ConfigError",
            Error::Shape { .. } => "ShapeError",
            Error::Degenerate(_) => "DegenerateInputError",
            Error::NonFinite(_) => "NumericError",
            Error::Input(_) => "InputError",
            Error::Precondition(_) => "PreconditionError",
            Error::EmptySplit(_) => "EmptySplitError",
            Error::EmptyTable(_) => "EmptyTableError",
            Error::UndefinedMetric(_) => "UndefinedMetricError",
            Error::MissingProxy { .. } => "MissingProxyError",
            Error::NotFound(_) => "NotFoundError",
            Error::Duplicate(_) => "DuplicateError",
            Error::HashMismatch(_) => "HashMismatchError",
            Error::Dependency { .. } => "DependencyError",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Serde(_) => "SerializationError",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
