use thiserror::Error;

/// Errors raised by the model, storage, solver and closed-loop layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmpcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("orbit does not close: {0}")]
    NotPeriodic(String),

    #[error("numeric failure in block `{label}`")]
    NumericFailure { label: String },

    #[error("numeric failure at closed-loop step {step}: {source}")]
    StepFailure {
        step: usize,
        #[source]
        source: Box<EmpcError>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EmpcError {
    fn from(e: std::io::Error) -> Self {
        EmpcError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, EmpcError>;

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(EmpcError::InvalidArgument(format!(
            "{what}: expected dimension {want}, got {got}"
        )));
    }
    Ok(())
}
