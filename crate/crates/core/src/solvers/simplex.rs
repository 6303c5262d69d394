use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexOptions {
    /// Iteration cap per run (each restart gets its own budget).
    pub max_iter: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Stop as soon as a vertex reaches this value.
    pub f_target: Option<f64>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { max_iter: 2000, x_tol: 1e-8, f_tol: 1e-10, restarts: 0, seed: 0, f_target: None }
    }
}

impl SimplexOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("simplex max_iter must be positive".into()));
        }
        if !(self.x_tol > 0.0 && self.f_tol > 0.0) {
            return Err(Error::InvalidParameter("simplex x_tol and f_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Nelder-Mead minimization with reflection 1, expansion 2, contraction 0.5 and
/// shrink 0.5. Non-finite objective values are treated as `+inf`.
///
/// Each restart perturbs the best point found so far by up to ±10% per
/// coordinate and runs a fresh simplex from there.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &SimplexOptions) -> Result<SimplexResult>
where
    F: Fn(&[f64]) -> f64,
{
    opts.validate()?;
    if x0.is_empty() {
        return Err(Error::InvalidParameter("nelder_mead needs at least one parameter".into()));
    }
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut best = run(&f, x0, f0, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        if opts.f_target.is_some_and(|t| best.f <= t) {
            break;
        }
        let start: Vec<f64> = best
            .x
            .iter()
            .map(|&v| {
                let u: f64 = rng.random_range(-0.1..=0.1);
                if v.abs() > 1e-3 { v * (1.0 + u) } else { v + u * 1e-2 }
            })
            .collect();
        let fs = finite_or_inf(f(&start));
        let mut next = run(&f, &start, fs, opts);
        next.iterations += best.iterations;
        next.evaluations += best.evaluations + 1;
        if next.f < best.f {
            best = next;
        } else {
            best.iterations = next.iterations;
            best.evaluations = next.evaluations;
        }
    }
    best.evaluations += 1;
    Ok(best)
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() { v } else { f64::INFINITY }
}

fn run<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], f0: f64, opts: &SimplexOptions) -> SimplexResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64]| {
        evals += 1;
        finite_or_inf(f(x))
    };

    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    let mut vals = vec![f0];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] = if p[i] != 0.0 { p[i] * 1.05 } else { 0.00025 };
        vals.push(eval(&p));
        pts.push(p);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let (lo, hi) = (order[0], order[n]);
        if opts.f_target.is_some_and(|t| vals[lo] <= t) {
            converged = true;
            break;
        }
        let diameter = order[1..]
            .iter()
            .map(|&i| pts[i].iter().zip(&pts[lo]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
            .fold(0.0, f64::max);
        let spread = order[1..].iter().map(|&i| (vals[i] - vals[lo]).abs()).fold(0.0, f64::max);
        if diameter <= opts.x_tol && spread <= opts.f_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let second = order[n - 1];
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&pts[hi]).map(|(c, h)| c + t * (c - h)).collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < vals[lo] {
            let xe = along(2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[hi] = xe;
                vals[hi] = fe;
            } else {
                pts[hi] = xr;
                vals[hi] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[hi] = xr;
            vals[hi] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[hi] {
            let xc = along(0.5);
            let fc = eval(&xc);
            (xc, if fc <= fr { Some(fc) } else { None })
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc);
            (xc, if fc < vals[hi] { Some(fc) } else { None })
        };
        if let Some(fc) = fc {
            pts[hi] = xc;
            vals[hi] = fc;
            continue;
        }
        let best = pts[lo].clone();
        for &i in &order[1..] {
            for (p, b) in pts[i].iter_mut().zip(&best) {
                *p = b + 0.5 * (*p - b);
            }
            vals[i] = eval(&pts[i]);
        }
    }
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let lo = order[0];
    SimplexResult { x: pts[lo].clone(), f: vals[lo], converged, iterations, evaluations: evals }
}
