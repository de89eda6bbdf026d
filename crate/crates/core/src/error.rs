use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The ground reaction would have to pull the robot down.
    #[error("unbalanced state: vertical ground reaction {0} N is not positive")]
    Unbalanced(f64),

    #[error("degenerate grasp: {0}")]
    DegenerateGrasp(String),

    #[error("QP subproblem infeasible: {0}")]
    InfeasibleStep(String),

    #[error("waypoint {index} at ({x:.4}, {y:.4}) is out of reach")]
    Unreachable { index: usize, x: f64, y: f64 },

    #[error("planning failed at waypoint {index}: {reason}")]
    StepFailure { index: usize, reason: String },

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("scenario validation error: {0}")]
    Validation(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
