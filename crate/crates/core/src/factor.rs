//! Truncated SVD factorization and the normalized rotation model
//! `D ~ (U T^-1)(T V^T)` linking abstract factors to chemical profiles.

use nalgebra::{DMatrix, SVD};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{frobenius_sq, Real};

/// `|det(T)|` below this multiple of the product of row norms marks `T` as degenerate.
pub const DEGENERATE_DET_RATIO: f64 = 1e-8;

/// Rank-`p` factorization `D ~ U V^T` with `U` carrying the singular values
/// and `V` orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactor<T: Real> {
    /// The factored data matrix, kept for residual computations.
    pub data: DMatrix<T>,
    /// Scores, `n x p`: left singular vectors times singular values.
    pub scores: DMatrix<T>,
    /// Loadings, `m x p`, orthonormal columns.
    pub loadings: DMatrix<T>,
    /// All singular values of `data`, descending.
    pub singular_values: Vec<T>,
    /// `||D - U V^T||^2`.
    pub truncation_ssq: T,
}

impl<T: Real> SvdFactor<T> {
    pub fn p(&self) -> usize {
        self.scores.ncols()
    }

    /// `U V^T`.
    pub fn reconstruction(&self) -> DMatrix<T> {
        &self.scores * self.loadings.transpose()
    }

    /// Squared Frobenius norm of the data.
    pub fn data_norm_sq(&self) -> T {
        frobenius_sq(&self.data)
    }

    /// Returns the factor with components `i` and `j` exchanged.
    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.scores.swap_columns(i, j);
        out.loadings.swap_columns(i, j);
        out
    }

    /// SHA-256 over the scores and loadings, as hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.scores.nrows() as u64).to_le_bytes());
        h.update((self.loadings.nrows() as u64).to_le_bytes());
        h.update((self.p() as u64).to_le_bytes());
        for v in self.scores.iter().chain(self.loadings.iter()) {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Least-squares rotation reproducing the given concentration profiles:
    /// solves `U X = C` for `X = T^-1` and returns `T`.
    pub fn rotation_for_profiles(&self, c: &DMatrix<T>) -> Result<DMatrix<T>> {
        if c.nrows() != self.scores.nrows() || c.ncols() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "profiles are {}x{}, factor scores are {}x{}",
                c.nrows(),
                c.ncols(),
                self.scores.nrows(),
                self.p()
            )));
        }
        let svd = SVD::new(self.scores.clone(), true, true);
        let t_inv = svd
            .solve(c, T::default_epsilon())
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        t_inv.try_inverse().ok_or(Error::DegenerateRotation { det: 0.0, threshold: DEGENERATE_DET_RATIO })
    }
}

/// Best rank-`p` approximation of `d` in the Frobenius norm.
///
/// Each loading column is signed so that its largest-magnitude entry is
/// positive (the first one on ties), which makes the result deterministic.
pub fn truncated_svd<T: Real>(d: &DMatrix<T>, p: usize) -> Result<SvdFactor<T>> {
    let (n, m) = d.shape();
    if p == 0 || p > n.min(m) {
        return Err(Error::InvalidParameter(format!("component count {p} must lie in 1..={}", n.min(m))));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("data contains non-finite entries".into()));
    }
    let svd = SVD::new(d.clone(), true, true);
    let u = svd.u.as_ref().expect("left vectors requested");
    let v_t = svd.v_t.as_ref().expect("right vectors requested");

    let mut scores = DMatrix::zeros(n, p);
    let mut loadings = DMatrix::zeros(m, p);
    for k in 0..p {
        let sigma = svd.singular_values[k];
        let mut best = 0;
        for j in 0..m {
            if v_t[(k, j)].abs() > v_t[(k, best)].abs() {
                best = j;
            }
        }
        let sign = if v_t[(k, best)] < T::zero() { -T::one() } else { T::one() };
        for j in 0..m {
            loadings[(j, k)] = sign * v_t[(k, j)];
        }
        for i in 0..n {
            scores[(i, k)] = sign * sigma * u[(i, k)];
        }
    }
    let recon = &scores * loadings.transpose();
    let truncation_ssq = ssq(d, &recon)?;
    Ok(SvdFactor {
        data: d.clone(),
        scores,
        loadings,
        singular_values: svd.singular_values.iter().copied().collect(),
        truncation_ssq,
    })
}

/// Sum of squared entrywise differences.
pub fn ssq<T: Real>(d: &DMatrix<T>, d_hat: &DMatrix<T>) -> Result<T> {
    if d.shape() != d_hat.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", d.shape(), d_hat.shape())));
    }
    Ok(d.iter().zip(d_hat.iter()).fold(T::zero(), |acc, (&a, &b)| {
        let e = a - b;
        acc + e * e
    }))
}

/// Free parameters of a normalized rotation matrix.
///
/// Two components use the unit-diagonal form `[[1, t12], [t21, 1]]`; three
/// components fix the first column to ones, `[[1, t12, t13], [1, t22, t23], [1, t32, t33]]`,
/// with `inner = [t22, t23, t32, t33]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationSpec<T: Real> {
    Two { t12: T, t21: T },
    Three { t12: T, t13: T, inner: [T; 4] },
}

impl<T: Real> RotationSpec<T> {
    pub fn p(&self) -> usize {
        match self {
            RotationSpec::Two { .. } => 2,
            RotationSpec::Three { .. } => 3,
        }
    }

    /// The grid coordinates `(t12, t21)` or `(t12, t13)`.
    pub fn grid_coords(&self) -> (T, T) {
        match *self {
            RotationSpec::Two { t12, t21 } => (t12, t21),
            RotationSpec::Three { t12, t13, .. } => (t12, t13),
        }
    }

    /// Reads the normalized parameters off an arbitrary rotation by rescaling
    /// its rows (diagonal for `p = 2`, first column for `p = 3`).
    pub fn from_matrix(t: &DMatrix<T>) -> Result<Self> {
        match t.shape() {
            (2, 2) => {
                if t[(0, 0)] == T::zero() || t[(1, 1)] == T::zero() {
                    return Err(Error::InvalidParameter("diagonal element is zero, cannot normalize".into()));
                }
                Ok(RotationSpec::Two { t12: t[(0, 1)] / t[(0, 0)], t21: t[(1, 0)] / t[(1, 1)] })
            }
            (3, 3) => {
                if (0..3).any(|r| t[(r, 0)] == T::zero()) {
                    return Err(Error::InvalidParameter("first-column element is zero, cannot normalize".into()));
                }
                let n = |r: usize, c: usize| t[(r, c)] / t[(r, 0)];
                Ok(RotationSpec::Three { t12: n(0, 1), t13: n(0, 2), inner: [n(1, 1), n(1, 2), n(2, 1), n(2, 2)] })
            }
            s => Err(Error::DimensionMismatch(format!("rotation must be 2x2 or 3x3, got {s:?}"))),
        }
    }
}

/// Builds the `p x p` rotation matrix.
pub fn realize_t<T: Real>(spec: &RotationSpec<T>) -> DMatrix<T> {
    let one = T::one();
    match *spec {
        RotationSpec::Two { t12, t21 } => DMatrix::from_row_slice(2, 2, &[one, t12, t21, one]),
        RotationSpec::Three { t12, t13, inner: [t22, t23, t32, t33] } => {
            DMatrix::from_row_slice(3, 3, &[one, t12, t13, one, t22, t23, one, t32, t33])
        }
    }
}

/// Errors when `|det(t)|` is below [`DEGENERATE_DET_RATIO`] times the product of row norms.
pub fn check_rotation<T: Real>(t: &DMatrix<T>) -> Result<()> {
    if !t.is_square() {
        return Err(Error::DimensionMismatch(format!("rotation must be square, got {:?}", t.shape())));
    }
    let det = t.determinant();
    let scale = t.row_iter().fold(T::one(), |acc, r| acc * r.norm());
    let threshold = T::lit(DEGENERATE_DET_RATIO) * scale;
    if !det.is_finite() || det.abs() < threshold || scale == T::zero() {
        return Err(Error::DegenerateRotation { det: det.to_f64_lossy(), threshold: threshold.to_f64_lossy() });
    }
    Ok(())
}

/// `C_hat = U T^-1`, `S_hat = T V^T`.
pub fn rotate<T: Real>(factor: &SvdFactor<T>, t: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if t.shape() != (factor.p(), factor.p()) {
        return Err(Error::DimensionMismatch(format!(
            "rotation is {:?}, factor has {} components",
            t.shape(),
            factor.p()
        )));
    }
    check_rotation(t)?;
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or(Error::DegenerateRotation { det: 0.0, threshold: DEGENERATE_DET_RATIO })?;
    let c_hat = &factor.scores * t_inv;
    let s_hat = t * factor.loadings.transpose();
    Ok((c_hat, s_hat))
}
