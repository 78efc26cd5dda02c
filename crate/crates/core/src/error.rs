use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: eigenvalue {index} is {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("matrix is not symmetric: max |a_ij - a_ji| = {0:e}")]
    NotSymmetric(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "chain diverged (replication {replication}, iteration {iteration}, client {client}): \
         |theta| = {norm:e}; reduce the step size eta"
    )]
    Diverged {
        replication: u64,
        iteration: usize,
        client: usize,
        norm: f64,
    },

    #[error("unsupported for this model: {0}")]
    Unsupported(String),

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("step size eta = {eta:e} exceeds the admissible maximum {eta_max:e}")]
    InadmissibleStep { eta: f64, eta_max: f64 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: msg.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::NoConvergence(_) | Error::NonFinite(_)
        )
    }
}
