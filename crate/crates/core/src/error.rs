//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, data layer and pipelines.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors of incompatible shapes.
    Shape { op: &'static str, detail: String },
    /// An operation that needs at least one snippet got an empty sequence.
    EmptySequence(&'static str),
    /// A caller violated an operation's contract (non-scalar backward root,
    /// degenerate segment, empty inner region, ...).
    Contract { op: &'static str, detail: String },
    /// A value was outside the operation's numeric domain.
    Domain { op: &'static str, detail: String },
    /// Invalid configuration value.
    Config(String),
    /// Invalid label vector.
    Label(String),
    /// A function that must be deterministic was observed to vary.
    Determinism(String),
    /// A checkpoint does not match the model or dataset it is applied to.
    Compat(String),
    /// Training produced a non-finite loss.
    NonFinite { step: u64, detail: String },
    /// Filesystem failure.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// JSON (de)serialization failure.
    Json { path: PathBuf, detail: String },
    /// Binary feature/checkpoint decoding failure.
    Decode {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    /// Manifest validation failure, named after the offending record.
    Manifest { record: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::EmptySequence(op) => write!(f, "{op}: empty sequence"),
            Error::Contract { op, detail } => write!(f, "{op}: contract violation: {detail}"),
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Label(msg) => write!(f, "label error: {msg}"),
            Error::Determinism(msg) => write!(f, "determinism error: {msg}"),
            Error::Compat(msg) => write!(f, "compatibility error: {msg}"),
            Error::NonFinite { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Json { path, detail } => write!(f, "json error on {}: {detail}", path.display()),
            Error::Decode {
                path,
                offset,
                detail,
            } => write!(
                f,
                "decode error in {} at byte {offset}: {detail}",
                path.display()
            ),
            Error::Manifest { record, detail } => {
                write!(f, "manifest error in record '{record}': {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
