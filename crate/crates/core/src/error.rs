use std::path::PathBuf;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("signal too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("unsupported sample rate {0} Hz (only 16000 Hz is accepted)")]
    SampleRate(u32),

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),

    #[error("cannot normalize an all-zero signal")]
    CannotNormalize,

    #[error("normalization statistics are missing")]
    MissingStats,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("no active frames in reference signal")]
    NoActiveFrames,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Coarse classification used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::MissingStats | Error::CorruptModel(_) => {
                ErrorClass::Config
            }
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
