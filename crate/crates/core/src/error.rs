use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("sampling failed: {0}")]
    SamplingFailure(String),

    #[error("backward called without a matching training forward pass")]
    StaleCache,

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("covariance product is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),

    #[error("parse failure: {0}")]
    Parse(String),

    #[error("range violation: {0}")]
    RangeViolation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("fixture exhausted after {0} responses")]
    FixtureExhausted(usize),

    #[error("no accepted candidates in search memory")]
    NoAcceptedCandidates,

    #[error("config error: {0}")]
    Config(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
