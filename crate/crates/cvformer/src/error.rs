use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

/// Crate-wide error type. Variants carry enough context to name the offending
/// op, subject, column, or file in the message.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch; `detail` includes the shapes involved.
    Shape { op: &'static str, detail: String },
    /// An op produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// API contract violation (consumed tape, non-scalar loss, bad label, ...).
    Contract(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Malformed dataset content; `subject` is set when one is known.
    Data { subject: Option<String>, detail: String },
    Io { path: PathBuf, source: io::Error },
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn data(subject: Option<&str>, detail: impl Into<String>) -> Self {
        Error::Data { subject: subject.map(str::to_owned), detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Data { subject: Some(id), detail } => write!(f, "subject {id}: {detail}"),
            Error::Data { subject: None, detail } => write!(f, "{detail}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
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
