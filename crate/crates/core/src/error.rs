use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the diarization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty loss: the mask selects no cells")]
    EmptyLoss,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("loss closure is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("rttm line {line}: {reason}")]
    Rttm { line: usize, reason: String },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} at byte 4 (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes, only {available} available (at byte {offset})")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("payload size mismatch: header declares {declared} bytes, file carries {actual}")]
    PayloadSize { declared: usize, actual: usize },

    #[error("invalid wav file")]
    Wav(#[from] hound::Error),

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
