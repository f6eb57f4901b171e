use thiserror::Error;

/// Errors raised by the solver, the differentiation stages and the learning harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at time step {t}")]
    NonFinite { what: &'static str, t: usize },

    #[error("control Hessian not positive definite at time step {t} after regularization {lambda:e}")]
    IndefiniteHessian { t: usize, lambda: f64 },

    #[error("active-set iteration for the box-constrained LQR did not settle after {0} rounds")]
    ActiveSetCycle(usize),

    #[error("iLQR did not converge: residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular {what} (condition estimate {condition:e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("solve for parameter {index} failed: {source}")]
    Perturbed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{skipped} of {total} records failed to converge")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerical solver (as opposed to bad input).
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Io(_) => false,
            Error::Perturbed { source, .. } => source.is_solver_failure(),
            _ => true,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
