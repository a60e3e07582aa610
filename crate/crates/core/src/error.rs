use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask: no cell is kept")]
    EmptyMask,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("missing archive entry: {0}")]
    MissingData(String),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("thresholds are not monotone: {0}")]
    NonMonotone(String),
    #[error("malformed one-hot target: {0}")]
    MalformedOneHot(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("rollout diverged at step {step}: |state| = {magnitude}")]
    Divergence { step: usize, magnitude: f64 },
    #[error("autodiff: {0}")]
    Tape(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("zero-norm field: {0}")]
    ZeroNorm(String),
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Divergence { .. }
                | Error::NonFiniteGradient(_)
                | Error::ZeroNorm(_)
        )
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
