//! Numerical core for feasible-area and sparse curve-resolution experiments on
//! bilinear data `D = C S`.

pub mod afs;
pub mod error;
pub mod factor;
pub mod mcr;
pub mod norms;
pub mod scalar;
pub mod simkit;
pub mod solvers;

pub use error::{Error, Result};
pub use scalar::Real;
