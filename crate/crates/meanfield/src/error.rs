use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value from {what} at particle {particle}")]
    NumericalDomain { what: String, particle: usize },

    #[error("divergence at step {step}, particle {particle}: |x| = {value:e}")]
    Divergence { step: usize, particle: usize, value: f64 },

    #[error("singular regression design, condition number {condition:e}")]
    SingularRegression { condition: f64 },

    #[error("{what} did not converge ({} iterations, last change {:e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { what: String, history: Vec<f64> },

    #[error("continuation stalled at alpha = {alpha} with step {delta}; retry with a smaller step")]
    Continuation { alpha: f64, delta: f64, history: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors that come from an iteration running out of budget.
    pub fn is_non_convergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Continuation { .. } | Error::Divergence { .. }
        )
    }
}
