use thiserror::Error;

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Failure modes shared by every estimation pathway.
#[derive(Debug, Clone, Error)]
pub enum EstimationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input file problem tied to a specific (1-based, header excluded) data row.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular system in {what}: {advice}")]
    Singular { what: &'static str, advice: String },

    #[error("constraint target is outside the convex hull of the sample (constraint `{label}`)")]
    Infeasible { label: String },

    #[error("{0} requires oracle data that is only available for synthetic populations")]
    OracleRequired(&'static str),

    #[error("i/o: {0}")]
    Io(String),

    #[error("{label}: {failures} of {replications} replicates failed")]
    TooManyFailures {
        label: String,
        failures: usize,
        replications: usize,
    },
}

impl EstimationError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EstimationError::InvalidInput(_)
            | EstimationError::Row { .. }
            | EstimationError::Degenerate(_)
            | EstimationError::OracleRequired(_)
            | EstimationError::Io(_) => 2,
            EstimationError::NonConvergence { .. }
            | EstimationError::Singular { .. }
            | EstimationError::TooManyFailures { .. } => 3,
            EstimationError::Infeasible { .. } => 4,
        }
    }

    pub(crate) fn singular(what: &'static str, advice: impl Into<String>) -> Self {
        EstimationError::Singular {
            what,
            advice: advice.into(),
        }
    }
}

impl From<std::io::Error> for EstimationError {
    fn from(e: std::io::Error) -> Self {
        EstimationError::Io(e.to_string())
    }
}
