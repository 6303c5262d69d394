//! Least-squares kernels and the derivative-free minimizer used by the
//! resolution and feasible-area code.

mod elastic_net;
mod nnls;
mod ols;
mod simplex;

pub use elastic_net::{elastic_net, elastic_net_gram, elastic_net_objective, ElasticNetFit, ElasticNetOptions};
pub use nnls::{nnls, nnls_gram};
pub use ols::{ols, OlsSolution};
pub use simplex::{nelder_mead, SimplexOptions, SimplexResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elastic-net penalty `lambda * sum((1 - alpha)/2 s^2 + alpha |s|)` plus the
/// norm exponent used when analysing surfaces.
///
/// `alpha = 1` is the Lasso, `alpha = 0` ridge, `lambda = 0` plain least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub alpha: f64,
    #[serde(default = "default_exponent")]
    pub x_exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl PenaltySpec {
    pub fn none() -> Self {
        Self { lambda: 0.0, alpha: 1.0, x_exponent: 1.0 }
    }

    pub fn lasso(lambda: f64) -> Self {
        Self { lambda, alpha: 1.0, x_exponent: 1.0 }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self { lambda, alpha: 0.0, x_exponent: 2.0 }
    }

    pub fn elastic(lambda: f64, alpha: f64) -> Self {
        Self { lambda, alpha, x_exponent: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=2.0).contains(&self.x_exponent) {
            return Err(Error::InvalidParameter(format!("x_exponent must lie in [0, 2], got {}", self.x_exponent)));
        }
        Ok(())
    }

    pub fn is_unpenalized(&self) -> bool {
        self.lambda == 0.0
    }
}
