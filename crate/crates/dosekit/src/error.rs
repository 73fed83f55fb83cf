use std::io;
use std::path::PathBuf;

use serde::Serialize;

/// Errors from reading or writing one of the binary formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Exit-status class of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Usage,
    Validation,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Validation => 2,
            ErrorKind::Runtime => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KitError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] dosekit_core::Error),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type KitResult<T> = Result<T, KitError>;

impl KitError {
    pub fn kind(&self) -> ErrorKind {
        use dosekit_core::Error as E;
        match self {
            KitError::Usage(_) => ErrorKind::Usage,
            KitError::Validation(_) | KitError::Parse { .. } => ErrorKind::Validation,
            KitError::Format { source, .. } => match source {
                FormatError::Io(_) => ErrorKind::Runtime,
                _ => ErrorKind::Validation,
            },
            KitError::Io { .. } => ErrorKind::Runtime,
            KitError::Core(e) => match e {
                E::OutOfRange { .. }
                | E::KernelTooSmall { .. }
                | E::InvalidGrid(_)
                | E::InvalidStructures(_)
                | E::Config(_)
                | E::Shape(_)
                | E::MissingDvh(_)
                | E::Adaptation(_) => ErrorKind::Validation,
                E::Model { source, .. } | E::PlanFailed { source, .. } => {
                    KitError::Core((**source).clone()).kind()
                }
                _ => ErrorKind::Runtime,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        KitError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        KitError::Format {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        KitError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Machine-readable failure record printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: ErrorKind,
    pub exit_code: i32,
    pub message: String,
}

impl From<&KitError> for ErrorRecord {
    fn from(e: &KitError) -> Self {
        let kind = e.kind();
        ErrorRecord {
            kind,
            exit_code: kind.exit_code(),
            message: e.to_string(),
        }
    }
}
