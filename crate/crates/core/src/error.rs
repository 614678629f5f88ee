use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal is empty")]
    EmptySignal,
    #[error("invalid resampling factor {0} (must be >= 2)")]
    InvalidFactor(usize),
    #[error("invalid sample: {0}")]
    NonFiniteSample(String),
    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("signal too short: need at least {needed} samples, got {actual}")]
    SignalTooShort { needed: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("undefined reference: {0}")]
    UndefinedReference(String),
    #[error("metric `{metric}` failed: {source}")]
    Metric {
        metric: String,
        #[source]
        source: Box<Error>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotAScalar(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    StaleGraph,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for codebook of size {size} (stage {stage})")]
    InvalidToken { stage: usize, token: usize, size: usize },
    #[error("loss breakdown is missing term `{0}`")]
    IncompleteBreakdown(&'static str),
    #[error("dataset is empty")]
    NoData,
    #[error("non-finite loss in {stage}, term `{term}`")]
    NonFiniteLoss { stage: String, term: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptySignal => "EmptySignal",
            Error::InvalidFactor(_) => "InvalidFactor",
            Error::NonFiniteSample(_) => "NonFiniteSample",
            Error::UnsupportedWav(_) => "UnsupportedWav",
            Error::MalformedWav(_) => "MalformedWav",
            Error::RateMismatch { .. } => "RateMismatch",
            Error::SignalTooShort { .. } => "SignalTooShort",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UndefinedReference(_) => "UndefinedReference",
            Error::Metric { source, .. } => source.kind(),
            Error::NotAScalar(_) => "NotAScalar",
            Error::StaleGraph => "StaleGraph",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidToken { .. } => "InvalidToken",
            Error::IncompleteBreakdown(_) => "IncompleteBreakdown",
            Error::NoData => "NoData",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::Bitstream(_) => "Bitstream",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
