use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("allocation has {got} entries, scenario needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature {feature} has depth {depth:e} m in front of vehicle {vehicle}")]
    Cheirality {
        feature: usize,
        vehicle: usize,
        depth: f64,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Information matrix is singular beyond the translation null space.
    #[error("unobservable configuration (condition number {condition:e})")]
    Unobservable { condition: f64 },

    /// No candidate of a grid-based allocator rounds to an observable
    /// integer allocation.
    #[error("no observable integer allocation found ({} candidates tried)", diagnostics.len())]
    NoFeasibleAllocation { diagnostics: Vec<String> },

    #[error("position estimation failed after {iterations} iterations: {reason}")]
    EstimationFailure {
        iterations: usize,
        reason: String,
        cost_trace: Vec<f64>,
    },
}

impl Error {
    /// Errors caused by numerics (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Unobservable { .. }
                | Error::NoFeasibleAllocation { .. }
                | Error::EstimationFailure { .. }
        )
    }

    /// Stable machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Cheirality { .. } => "cheirality",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::Unobservable { .. } => "unobservable",
            Error::NoFeasibleAllocation { .. } => "infeasible",
            Error::EstimationFailure { .. } => "estimation_failure",
        }
    }
}
