use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Non-negative least squares `min ||b - A x||^2` s.t. `x >= 0` (Lawson-Hanson active set).
pub fn nnls<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!("A has {} rows, b has {}", a.nrows(), b.len())));
    }
    let gram = a.transpose() * a;
    let rhs = a.transpose() * b;
    Ok(nnls_gram(&gram, &rhs))
}

/// Active-set NNLS on the normal equations: minimizes `x'Gx/2 - h'x` over `x >= 0`,
/// where `G = A'A` and `h = A'b`. Lets callers reuse one Gram matrix across
/// many right-hand sides.
pub fn nnls_gram<T: Real>(gram: &DMatrix<T>, rhs: &DVector<T>) -> DVector<T> {
    let k = rhs.len();
    let mut x = DVector::zeros(k);
    if k == 0 {
        return x;
    }
    let scale = gram.iter().chain(rhs.iter()).fold(T::zero(), |m, v| m.max(v.abs()));
    if scale == T::zero() {
        return x;
    }
    let tol = T::lit(10.0 * k as f64) * T::default_epsilon() * scale;
    let mut passive = vec![false; k];
    let mut blocked = vec![false; k];

    for _ in 0..(3 * k + 10) {
        let w = rhs - gram * &x;
        let mut pick = None;
        for j in 0..k {
            if !passive[j] && !blocked[j] && w[j] > tol && pick.is_none_or(|p: usize| w[j] > w[p]) {
                pick = Some(j);
            }
        }
        let Some(j) = pick else { break };
        passive[j] = true;

        let mut first = true;
        for _ in 0..(3 * k + 10) {
            let z = solve_passive(gram, rhs, &passive);
            if (0..k).all(|i| !passive[i] || z[i] > T::zero()) {
                x = z;
                blocked.iter_mut().for_each(|b| *b = false);
                break;
            }
            if first && z[j] <= T::zero() {
                // the new variable cannot enter; leave the current iterate alone
                passive[j] = false;
                blocked[j] = true;
                break;
            }
            first = false;
            blocked.iter_mut().for_each(|b| *b = false);
            let mut alpha = T::one();
            for i in 0..k {
                if passive[i] && z[i] <= T::zero() {
                    let denom = x[i] - z[i];
                    if denom > T::zero() {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            for i in 0..k {
                if passive[i] {
                    let xi = x[i];
                    x[i] = xi + alpha * (z[i] - xi);
                    if x[i] <= tol / scale.max(T::one()) {
                        x[i] = T::zero();
                        passive[i] = false;
                    }
                }
            }
        }
    }
    x
}

fn solve_passive<T: Real>(gram: &DMatrix<T>, rhs: &DVector<T>, passive: &[bool]) -> DVector<T> {
    let idx: Vec<usize> = (0..rhs.len()).filter(|&i| passive[i]).collect();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| gram[(idx[r], idx[c])]);
    let sub_rhs = DVector::from_fn(idx.len(), |r, _| rhs[idx[r]]);
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&sub_rhs),
        None => sub
            .svd(true, true)
            .solve(&sub_rhs, T::default_epsilon())
            .unwrap_or_else(|_| DVector::zeros(idx.len())),
    };
    let mut z = DVector::zeros(rhs.len());
    for (r, &i) in idx.iter().enumerate() {
        z[i] = sol[r];
    }
    z
}
