use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate rotation: |det(T)| = {det:e} is below {threshold:e}")]
    DegenerateRotation { det: f64, threshold: f64 },

    #[error("objective is not finite at the starting point")]
    NonFiniteStart,

    #[error("no feasible cell found on the grid; widen the grid bounds or refine the steps")]
    EmptyAfs,

    #[error("component {0} collapsed to an all-zero profile")]
    ComponentCollapse(usize),

    #[error("region too small for gradient estimation: {0} cells present, need at least 9")]
    RegionTooSmall(usize),
}

pub type Result<V, E = Error> = std::result::Result<V, E>;
