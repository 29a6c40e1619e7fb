use thiserror::Error;

/// Errors raised by game construction, oracles, fitting and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid transition kernel: {0}")]
    InvalidKernel(String),

    #[error("reward bound violated: |R| reaches {max_abs} > r_max = {r_max}")]
    BoundViolation { max_abs: f64, r_max: f64 },

    #[error("discretization too large: {required} entries exceeds cap {cap}")]
    Size { required: u128, cap: u128 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged{} at step {step}", iteration.map(|k| format!(" in iteration {k}")).unwrap_or_default())]
    Divergence { iteration: Option<usize>, step: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("evaluation budget of {0} function calls exhausted")]
    BudgetExhausted(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
