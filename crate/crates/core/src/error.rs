use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("value {0:?} does not belong to this tape")]
    ForeignVar(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("optimizer step without gradients")]
    MissingGradients,

    #[error("unknown variant `{0}` (expected L, M or S)")]
    UnknownVariant(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("not a checkpoint: bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint payload: tensor `{name}` needs {needed} bytes, {available} available")]
    TruncatedPayload { name: String, needed: usize, available: usize },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("manifest {path}: line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("manifest {path}: line {line}: referenced file {missing} does not exist")]
    MissingFile { path: PathBuf, line: usize, missing: PathBuf },

    #[error("manifest {path}: line {line}: duplicate entry (first seen on line {first})")]
    DuplicateEntry { path: PathBuf, line: usize, first: usize },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
