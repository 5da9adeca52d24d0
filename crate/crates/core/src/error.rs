use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: payload does not match header, expected {expected} bytes, found {found}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("duplicate parameter {0}")]
    DuplicateParam(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable short code used on the CLI's machine-parsable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::BadMagic { .. } => "bad-magic",
            Error::Truncated { .. } => "truncated",
            Error::PayloadMismatch { .. } => "payload-mismatch",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Malformed { .. } => "malformed",
            Error::Config(_) => "config",
            Error::MissingGrad(_) => "missing-grad",
            Error::UnknownParam(_) => "unknown-param",
            Error::DuplicateParam(_) => "duplicate-param",
            Error::NonFinite { .. } => "non-finite",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
        }
    }
}
