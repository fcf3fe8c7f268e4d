use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid symbol prior: {0}")]
    InvalidPrior(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid waveform bank: {0}")]
    InvalidWaveforms(String),

    #[error("Gram matrix is not positive definite (smallest pivot {0:e})")]
    SingularGram(f64),

    #[error("weight system Rq = P_C is singular (pivot {0:e})")]
    SingularWeightSystem(f64),

    #[error("closed-form prox requires the alphabet {{-1, 0, 1}}, got {0:?}")]
    UnsupportedAlphabet(Vec<f64>),

    #[error("operator is zero; Lipschitz constant undefined")]
    DegenerateOperator,

    #[error("solver diverged at iteration {iteration} (step size too large?)")]
    Divergence { iteration: usize },

    #[error("linear system in {0} is singular")]
    SingularSystem(&'static str),

    #[error("exhaustive search over {candidates} candidates exceeds the bound {bound}")]
    EnumerationBound { candidates: f64, bound: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
