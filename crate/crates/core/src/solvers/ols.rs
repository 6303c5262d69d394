use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OlsSolution<T: Real> {
    /// `k x q` coefficients.
    pub x: DMatrix<T>,
    /// Set when `A` was rank deficient and the minimum-norm solution was returned.
    pub rank_deficient: bool,
    pub rank: usize,
}

/// Column-wise least squares `min ||B - A X||^2` via SVD.
///
/// Singular values below `max(n, k) * eps * sigma_max` are treated as zero,
/// giving the pseudo-inverse solution for rank-deficient designs.
pub fn ols<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<OlsSolution<T>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!("A has {} rows, B has {}", a.nrows(), b.nrows())));
    }
    let k = a.ncols();
    if k == 0 {
        return Ok(OlsSolution { x: DMatrix::zeros(0, b.ncols()), rank_deficient: false, rank: 0 });
    }
    let svd = SVD::new(a.clone(), true, true);
    let sigma_max = svd.singular_values.iter().fold(T::zero(), |m, &s| m.max(s));
    let cutoff = T::lit(a.nrows().max(k) as f64) * T::default_epsilon() * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let x = svd.solve(b, cutoff).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(OlsSolution { x, rank_deficient: rank < k, rank })
}
