use std::io;
use std::path::PathBuf;

/// Errors of the IO layer and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vlkd_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("configuration error in {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("acceptance check failed: {0}")]
    Check(String),
}

impl Error {
    /// Name printed by the command line on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Core(e) => e.class(),
            Error::Io { .. } => "IoError",
            Error::Format { .. } => "FormatError",
            Error::Config { .. } => "ConfigError",
            Error::Usage(_) => "UsageError",
            Error::Check(_) => "CheckError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
