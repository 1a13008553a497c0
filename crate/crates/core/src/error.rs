use thiserror::Error;

/// Errors raised across the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A simulated state left the admissible region (non-finite or above the guard threshold).
    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("unstable system: spectral radius {0:.6}")]
    Unstable(f64),
    #[error("variance unavailable: {0}")]
    VarianceUnavailable(String),
    #[error("all candidates failed: {0}")]
    AllCandidatesFailed(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
