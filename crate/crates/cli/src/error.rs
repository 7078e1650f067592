use std::fmt;

use petdiff_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Io,
    InvalidData,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::Io => 4,
            ErrorKind::InvalidData => 5,
            ErrorKind::Numerical => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: &str) -> Self {
        CliError {
            kind: self.kind,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Io { .. } => ErrorKind::Io,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::PayloadMismatch { .. } => ErrorKind::InvalidData,
            Error::Shape(_) | Error::Invalid(_) => ErrorKind::InvalidData,
            Error::Numerical(_) => ErrorKind::Numerical,
        };
        CliError::new(kind, e.to_string())
    }
}

/// Attaches a stage or file name to any error convertible to [`CliError`].
pub trait Context<T> {
    fn in_context(self, what: &str) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn in_context(self, what: &str) -> CliResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
