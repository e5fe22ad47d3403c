use thiserror::Error;

/// Errors raised across the planning stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trajectory too short: need at least one interior knot, got horizon {horizon}")]
    TooShort { horizon: usize },

    #[error("degenerate direction: approach axis is parallel to world up")]
    DegenerateDirection,

    #[error("non-finite residual in block {block}")]
    NonFiniteResidual { block: usize },

    #[error("normal equations remained singular up to damping {damping:e}")]
    SingularNormalEquations { damping: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible scenario: residual penetration {penetration:.3} m")]
    InfeasibleScenario { penetration: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
