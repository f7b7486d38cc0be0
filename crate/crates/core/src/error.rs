use thiserror::Error;

/// Errors produced anywhere in the simulation, dictionary, surrogate and
/// optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tissue parameters: {0}")]
    InvalidTissue(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible flip train: {0}")]
    InfeasibleTrain(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("signal has zero norm")]
    ZeroSignal,
    #[error("dictionary contains no atoms")]
    EmptyDictionary,
    #[error("parameter grid has no feasible (T1, T2, B1) combination")]
    EmptyGrid,
    #[error("surrogate engine requested but no weights are loaded")]
    MissingWeights,
    #[error("rotation matrix is not orthogonal (deviation {0:e})")]
    NonOrthogonal(f64),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    }
}

impl Error {
    /// Coarse error category, used by the command-line front end to pick an
    /// exit status.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidTissue(_)
            | Error::InvalidSequence(_)
            | Error::InvalidConfig(_)
            | Error::InfeasibleTrain(_)
            | Error::LengthMismatch { .. }
            | Error::ShapeMismatch(_)
            | Error::ZeroSignal
            | Error::EmptyGrid
            | Error::MissingWeights => ErrorCategory::Config,
            Error::Numeric(_) | Error::NonOrthogonal(_) => ErrorCategory::Numeric,
            Error::EmptyDictionary
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated
            | Error::Format(_)
            | Error::Io(_) => ErrorCategory::Format,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Format,
}

pub type Result<T> = std::result::Result<T, Error>;
