use thiserror::Error;

/// Crate-wide error type. Numerical guards (blow-up, injectivity radius)
/// and structural misuse (spec mismatch, missing linearity) are kept in a
/// single enum so they propagate cleanly through composed operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("group spec mismatch: {left} vs {right}")]
    SpecMismatch { left: String, right: String },

    #[error("matrix violates the group constraint (residual {residual:.3e})")]
    ConstraintViolation { residual: f64 },

    #[error("element outside the injectivity radius of log (angle {angle:.6})")]
    OutOfInjectivityRadius { angle: f64 },

    #[error("non-finite right-hand side at t = {t}")]
    NonFiniteRhs { t: f64 },

    #[error("map produced a non-finite output")]
    NonFiniteOutput,

    #[error("trajectory left the domain guard at t = {t} (|x| = {norm:.3e})")]
    Blowup { t: f64, norm: f64 },

    #[error("curve junction {index} does not match (gap {gap:.3e})")]
    EndpointMismatch { index: usize, gap: f64 },

    #[error("operation requires a linear anchored bundle")]
    NotLinear,

    #[error("reparameterization map is not strictly increasing")]
    NotMonotone,

    #[error("base curve does not return to its start (gap {gap:.3e})")]
    NotALoop { gap: f64 },

    #[error("bundle morphism is not invertible where required: {0}")]
    NotInvertible(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("holonomy sample contains no usable logarithms")]
    NoLogsAvailable,

    #[error("control is not expressible in the serializable schema")]
    NotSerializable,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
