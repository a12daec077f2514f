use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty tail at threshold {threshold}")]
    EmptyTail { threshold: f64 },

    /// The estimated density of the portfolio outcome at the quantile is below
    /// the configured threshold, so the derivative formulas are undefined.
    #[error("density {density:e} at {at} is below the threshold {threshold:e}")]
    DensityTooLow { at: f64, density: f64, threshold: f64 },

    #[error("degenerate sample: zero spread")]
    DegenerateSample,

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("quadrature did not converge (error estimate {estimate:e})")]
    QuadratureFailed { estimate: f64 },

    #[error("alpha {alpha} times N = {n} is not an integer")]
    AlphaOffGrid { alpha: f64, n: usize },

    #[error("sample contains duplicate values")]
    DuplicateValues,

    #[error("method/input mismatch: {0}")]
    MethodMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("evaluation failed at probe point: {0}")]
    ProbeFailed(String),
}

impl RiskError {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            RiskError::DimensionMismatch { .. } => "DimensionMismatch",
            RiskError::InvalidInput(_) => "InvalidInput",
            RiskError::EmptyTail { .. } => "EmptyTail",
            RiskError::DensityTooLow { .. } => "DensityTooLow",
            RiskError::DegenerateSample => "DegenerateSample",
            RiskError::NotPositiveDefinite => "NotPositiveDefinite",
            RiskError::QuadratureFailed { .. } => "QuadratureFailed",
            RiskError::AlphaOffGrid { .. } => "AlphaOffGrid",
            RiskError::DuplicateValues => "DuplicateValues",
            RiskError::MethodMismatch(_) => "MethodMismatch",
            RiskError::NonFinite(_) => "NonFinite",
            RiskError::ProbeFailed(_) => "ProbeFailed",
        }
    }

    /// True for failures of a numerical guard (as opposed to malformed input).
    pub fn is_numerical_guard(&self) -> bool {
        matches!(
            self,
            RiskError::EmptyTail { .. }
                | RiskError::DensityTooLow { .. }
                | RiskError::DegenerateSample
                | RiskError::NotPositiveDefinite
                | RiskError::QuadratureFailed { .. }
                | RiskError::NonFinite(_)
                | RiskError::ProbeFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, RiskError>;
