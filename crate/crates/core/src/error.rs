use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed manifest line: {reason}")]
    ManifestLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("{path}: expected 16000 Hz audio, found {found} Hz")]
    SampleRate { path: PathBuf, found: u32 },

    #[error("{path}: expected mono audio, found {found} channels")]
    Channels { path: PathBuf, found: u16 },

    #[error("{path}: unreadable audio: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("utterance `{id}` has {n_samples} samples, over the batch budget of {budget}")]
    OverBudget {
        id: String,
        n_samples: usize,
        budget: usize,
    },

    #[error("input of {n_samples} samples is too short to yield a frame")]
    TooShort { n_samples: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} frames")]
    MaskIndex { index: usize, len: usize },

    #[error("utterance variant `{variant}` requires {expected}, got {n_utt} utterance tokens")]
    VariantMismatch {
        variant: &'static str,
        expected: &'static str,
        n_utt: usize,
    },

    #[error("non-finite loss at step {step} on utterance `{id}`")]
    NonFinite { step: u64, id: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("feature dump {path}: {reason}")]
    Features { path: PathBuf, reason: String },

    #[error("cannot build split: {0}")]
    Split(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error("metrics: {0}")]
    Metrics(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for CLI exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::VariantMismatch { .. } => ErrorCategory::Usage,
            Error::NonFinite { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}
