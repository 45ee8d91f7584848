use thiserror::Error;

/// Errors raised by the estimation, filtering and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {required}, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("degenerate weights: 1 - w'w = {0:e} is below tolerance")]
    DegenerateWeights(f64),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input")]
    EmptyInput,

    #[error("pilot density is exactly zero at particle {0}")]
    ZeroPilotDensity(usize),

    #[error("filter divergence: {0}")]
    Divergence(String),

    #[error("all {total} SNEES terms were discarded (threshold {threshold})")]
    AllTermsDiscarded { total: usize, threshold: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run {run} failed (master seed {seed}, stream {stream:#018x}): {source}")]
    RunFailed {
        run: usize,
        seed: u64,
        stream: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
