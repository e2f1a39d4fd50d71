use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration produced a non-finite state at step {step}")]
    IntegrationFailure { step: usize },

    #[error("non-finite observable value for state index {index}")]
    NonFiniteFeature { index: usize },

    #[error("no factorization block passed the residual threshold (eps_h = {eps_h:e}); the bilinear input term would vanish")]
    EmptySelection { eps_h: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("synthesis result is not optimal")]
    NotOptimal,

    #[error("stage precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("synthesis failed with status {status}")]
    SynthesisFailed { status: String },

    #[error("closed-loop success rate {success_rate:.3} is below the gate {gate:.3}")]
    GateFailed { success_rate: f64, gate: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 configuration, 3 stage precondition, 4 synthesis
    /// infeasible, 5 evaluation gate, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Precondition(_) | Error::NotOptimal => 3,
            Error::SynthesisFailed { .. } => 4,
            Error::GateFailed { .. } => 5,
            _ => 1,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
