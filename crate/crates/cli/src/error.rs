use std::fmt;
use std::path::Path;

use gaze_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Io | ErrorKind::Internal => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

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

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numeric, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {err}", path.display()))
    }

    /// Treat a library error as a configuration problem, e.g. a failed validation.
    pub fn from_config(err: CoreError) -> Self {
        Self::config(err.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let kind = match &err {
            CoreError::NonFinite(_) => ErrorKind::Numeric,
            CoreError::Io { .. } => ErrorKind::Io,
            CoreError::InvalidArgument(_)
            | CoreError::Parse { .. }
            | CoreError::Range(_)
            | CoreError::Format(_)
            | CoreError::Image(_)
            | CoreError::Json(_) => ErrorKind::Data,
            CoreError::Shape { .. }
            | CoreError::UnknownOp(_)
            | CoreError::NotScalar(_)
            | CoreError::TapeConsumed
            | CoreError::MissingGrad(_) => ErrorKind::Internal,
        };
        CliError::new(kind, err.to_string())
    }
}
