use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants double as the error
/// categories used for process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } => 3,
            Error::Contract(_) => 4,
            Error::Validation(_) => 5,
            Error::Training { .. } => 6,
            Error::NonFinite(_) => 6,
            Error::InsufficientData(_) => 7,
            Error::Format(_) => 8,
            Error::Version { .. } | Error::Incompatible(_) => 9,
            Error::Config(_) => 10,
            Error::Io { .. } => 11,
        }
    }
}
