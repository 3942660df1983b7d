use thiserror::Error;

/// Errors surfaced by model construction, calibration and solving.
#[derive(Debug, Error)]
pub enum Error {
    /// A balance-sheet or model parameter is outside its valid domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Volatility calibration has no solution for the requested target.
    #[error("no volatility solves ln(W/(W-E)) + mu = {c:.6e} <= 0 for node {node}")]
    NoVolatilitySolution { node: usize, c: f64 },

    /// The correlation matrix is not symmetric positive definite.
    #[error("correlation matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A dimension or index disagreement between inputs.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The exact-probability method was asked for more free dimensions
    /// than the quadrature supports.
    #[error("exact joint probability limited to {max} free dimensions, got {got}")]
    TooManyDimensions { got: usize, max: usize },

    /// The exact dynamic-programming oracle refuses networks above its cap.
    #[error("oracle supports at most {max} active nodes, network has {got}")]
    OracleTooLarge { got: usize, max: usize },

    /// A step was requested at or beyond the horizon.
    #[error("episode over: t = {t}, horizon = {horizon}")]
    EpisodeOver { t: usize, horizon: usize },

    /// Fitting failed (degenerate design matrix, no usable states, ...).
    #[error("fit failed: {0}")]
    FitFailed(String),

    /// Serialization or deserialization of a model artifact failed.
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
