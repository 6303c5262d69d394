use nalgebra::{DMatrix, DVector};

use super::PenaltySpec;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct ElasticNetOptions<T: Real> {
    pub nonneg: bool,
    /// Stop once the largest coordinate change in a sweep drops below this.
    pub tol: f64,
    pub max_sweeps: usize,
    pub warm_start: Option<DVector<T>>,
}

impl<T: Real> Default for ElasticNetOptions<T> {
    fn default() -> Self {
        Self { nonneg: false, tol: 1e-8, max_sweeps: 10_000, warm_start: None }
    }
}

impl<T: Real> ElasticNetOptions<T> {
    pub fn nonneg() -> Self {
        Self { nonneg: true, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ElasticNetFit<T: Real> {
    pub x: DVector<T>,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after every sweep; the first entry is the starting point.
    pub objective_trace: Vec<T>,
}

/// `1/2 ||b - A x||^2 + lambda * sum((1 - alpha)/2 x^2 + alpha |x|)`.
pub fn elastic_net_objective<T: Real>(a: &DMatrix<T>, b: &DVector<T>, x: &DVector<T>, penalty: &PenaltySpec) -> T {
    let r = b - a * x;
    T::lit(0.5) * r.norm_squared() + penalty_term(x, penalty)
}

fn penalty_term<T: Real>(x: &DVector<T>, penalty: &PenaltySpec) -> T {
    let lambda = T::lit(penalty.lambda);
    let alpha = T::lit(penalty.alpha);
    let half_ridge = (T::one() - alpha) * T::lit(0.5);
    x.iter().fold(T::zero(), |acc, &v| acc + lambda * (half_ridge * v * v + alpha * v.abs()))
}

/// Cyclic coordinate descent for the elastic net.
pub fn elastic_net<T: Real>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    penalty: &PenaltySpec,
    opts: &ElasticNetOptions<T>,
) -> Result<ElasticNetFit<T>> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!("A has {} rows, b has {}", a.nrows(), b.len())));
    }
    let gram = a.transpose() * a;
    let rhs = a.transpose() * b;
    elastic_net_gram(&gram, &rhs, b.norm_squared(), penalty, opts)
}

/// Same as [`elastic_net`] but on precomputed `G = A'A`, `h = A'b` and `b'b`.
pub fn elastic_net_gram<T: Real>(
    gram: &DMatrix<T>,
    rhs: &DVector<T>,
    b_norm_sq: T,
    penalty: &PenaltySpec,
    opts: &ElasticNetOptions<T>,
) -> Result<ElasticNetFit<T>> {
    penalty.validate()?;
    let k = rhs.len();
    if gram.nrows() != k || gram.ncols() != k {
        return Err(Error::DimensionMismatch(format!("Gram matrix is {}x{}, rhs has {}", gram.nrows(), gram.ncols(), k)));
    }
    let mut x = match &opts.warm_start {
        Some(w) if w.len() == k => w.clone(),
        Some(w) => return Err(Error::DimensionMismatch(format!("warm start has {} entries, expected {k}", w.len()))),
        None => DVector::zeros(k),
    };
    if opts.nonneg {
        x.iter_mut().for_each(|v| *v = v.max(T::zero()));
    }
    let l1 = T::lit(penalty.lambda * penalty.alpha);
    let l2 = T::lit(penalty.lambda * (1.0 - penalty.alpha));
    let tol = T::lit(opts.tol);
    let objective = |x: &DVector<T>| {
        let gx = gram * x;
        T::lit(0.5) * (b_norm_sq + x.dot(&gx)) - rhs.dot(x) + penalty_term(x, penalty)
    };

    // G x, kept current so each coordinate step is O(k)
    let mut gx = gram * &x;
    let mut trace = vec![objective(&x)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change = T::zero();
        for j in 0..k {
            let gjj = gram[(j, j)];
            let denom = gjj + l2;
            let old = x[j];
            let new = if denom > T::zero() {
                let rho = rhs[j] - gx[j] + gjj * old;
                let v = soft_threshold(rho, l1) / denom;
                if opts.nonneg { v.max(T::zero()) } else { v }
            } else {
                T::zero()
            };
            let delta = new - old;
            if delta != T::zero() {
                x[j] = new;
                gx.axpy(delta, &gram.column(j), T::one());
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(&x));
        if max_change < tol {
            converged = true;
            break;
        }
    }
    Ok(ElasticNetFit { x, converged, sweeps, objective_trace: trace })
}

fn soft_threshold<T: Real>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{nnls, ols};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64, n: usize, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // diagonal boost keeps the columns far from collinear
        let mut a = DMatrix::from_fn(n, k, |_, _| rng.random_range(-0.3..0.3));
        for j in 0..k.min(n) {
            a[(j, j)] += 2.0;
        }
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (a, b)
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn unpenalized_matches_ols_and_nnls() {
        let (a, b) = random_system(1, 20, 4);
        let fit = elastic_net(&a, &b, &PenaltySpec::none(), &ElasticNetOptions::default()).unwrap();
        assert!(fit.converged);
        assert_monotone(&fit.objective_trace);
        let ls = ols(&a, &DMatrix::from_column_slice(20, 1, b.as_slice())).unwrap();
        assert!((&fit.x - ls.x.column(0)).amax() < 1e-8);

        let fit = elastic_net(&a, &b, &PenaltySpec::none(), &ElasticNetOptions::nonneg()).unwrap();
        assert!((&fit.x - nnls(&a, &b).unwrap()).amax() < 1e-8);
    }

    #[test]
    fn lasso_on_orthonormal_design_soft_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        let b = DVector::from_fn(12, |_, _| rng.random_range(-2.0..2.0));
        let lambda = 0.3;
        let fit = elastic_net(&q, &b, &PenaltySpec::lasso(lambda), &ElasticNetOptions::default()).unwrap();
        assert_monotone(&fit.objective_trace);
        let z = q.transpose() * &b;
        for j in 0..5 {
            let expected = z[j].signum() * (z[j].abs() - lambda).max(0.0);
            assert!((fit.x[j] - expected).abs() < 1e-8, "{j}: {} vs {expected}", fit.x[j]);
        }
    }

    #[test]
    fn ridge_matches_closed_form() {
        for seed in 0..10 {
            let (a, b) = random_system(10 + seed, 25, 5);
            let lambda = 0.7;
            let fit = elastic_net(&a, &b, &PenaltySpec::ridge(lambda), &ElasticNetOptions::default()).unwrap();
            assert_monotone(&fit.objective_trace);
            let lhs = a.transpose() * &a + DMatrix::identity(5, 5) * lambda;
            let expected = lhs.cholesky().unwrap().solve(&(a.transpose() * &b));
            assert!((&fit.x - expected).amax() < 1e-8);
        }
    }

    #[test]
    fn large_lambda_zeroes_everything() {
        let (a, b) = random_system(3, 10, 3);
        let fit = elastic_net(&a, &b, &PenaltySpec::lasso(1e6), &ElasticNetOptions::default()).unwrap();
        assert_eq!(fit.x, DVector::zeros(3));
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let (a, b) = random_system(4, 15, 4);
        let pen = PenaltySpec::elastic(0.2, 0.5);
        let cold = elastic_net(&a, &b, &pen, &ElasticNetOptions::default()).unwrap();
        let opts = ElasticNetOptions { warm_start: Some(DVector::from_element(4, 3.0)), ..Default::default() };
        let warm = elastic_net(&a, &b, &pen, &opts).unwrap();
        assert!((cold.x - warm.x).amax() < 1e-7);
        assert_monotone(&warm.objective_trace);
    }

    #[test]
    fn sweep_cap_reports_nonconvergence() {
        let (a, b) = random_system(5, 15, 4);
        let opts = ElasticNetOptions { max_sweeps: 1, tol: 1e-14, ..Default::default() };
        let fit = elastic_net(&a, &b, &PenaltySpec::none(), &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.sweeps, 1);
    }

    #[test]
    fn objective_helper_matches_trace() {
        let (a, b) = random_system(6, 15, 4);
        let pen = PenaltySpec::elastic(0.1, 0.3);
        let fit = elastic_net(&a, &b, &pen, &ElasticNetOptions::default()).unwrap();
        let direct = elastic_net_objective(&a, &b, &fit.x, &pen);
        assert!((direct - fit.objective_trace.last().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn invalid_penalty_rejected() {
        let (a, b) = random_system(7, 5, 2);
        let bad = PenaltySpec { lambda: -1.0, alpha: 0.5, x_exponent: 1.0 };
        assert!(elastic_net(&a, &b, &bad, &ElasticNetOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn objective_never_increases(seed in 0u64..5000, lambda in 0.0f64..2.0, alpha in 0.0f64..=1.0, nonneg: bool) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
            let opts = ElasticNetOptions { nonneg, ..Default::default() };
            let fit = elastic_net(&a, &b, &PenaltySpec::elastic(lambda, alpha), &opts).unwrap();
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * f64::abs(w[0]).max(1.0));
            }
            if nonneg {
                prop_assert!(fit.x.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn lasso_l1_shrinks_with_lambda(seed in 0u64..5000, l1 in 0.0f64..1.0, dl in 0.0f64..1.0) {
            let (a, b) = random_system(seed, 12, 4);
            let opts = ElasticNetOptions { tol: 1e-12, ..Default::default() };
            let small = elastic_net(&a, &b, &PenaltySpec::lasso(l1), &opts).unwrap();
            let large = elastic_net(&a, &b, &PenaltySpec::lasso(l1 + dl), &opts).unwrap();
            prop_assert!(large.x.abs().sum() <= small.x.abs().sum() + 1e-10);
        }
    }
}
