//! Multivariate curve resolution by alternating least squares with
//! non-negativity and an optional elastic-net penalty on the spectra.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::ssq;
use crate::scalar::{frobenius_sq, Real};
use crate::solvers::{elastic_net_gram, nnls_gram, ElasticNetOptions, PenaltySpec};

#[derive(Debug, Clone, PartialEq)]
pub enum InitMethod<T: Real> {
    /// Successive projections over the scans: picks the rows of `D` that are
    /// least explained by the ones already chosen.
    PurestRows,
    /// `p` distinct non-zero scans drawn with the given seed.
    RandomRows,
    Provided(DMatrix<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McrOptions {
    /// Relative ssq change that counts as converged.
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for McrOptions {
    fn default() -> Self {
        Self { epsilon: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McrResult<T: Real> {
    /// Concentration profiles, scans x components.
    pub c: DMatrix<T>,
    /// Spectra, components x channels, rows max-normalized to 1.
    pub s: DMatrix<T>,
    /// `ssq(D, C S)` after every iteration.
    pub ssq_trace: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub penalty: PenaltySpec,
}

impl<T: Real> McrResult<T> {
    pub fn final_ssq(&self) -> T {
        *self.ssq_trace.last().expect("at least one iteration runs")
    }

    /// Sum over components of `sum |s|`.
    pub fn spectra_l1(&self) -> T {
        self.s.iter().fold(T::zero(), |acc, v| acc + v.abs())
    }
}

/// Clips negatives and scales every row to a maximum of one.
fn normalize_rows<T: Real>(mut s: DMatrix<T>) -> Result<DMatrix<T>> {
    for k in 0..s.nrows() {
        let mut row = s.row_mut(k);
        row.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let max = row.max();
        if max <= T::zero() || !max.is_finite() {
            return Err(Error::ComponentCollapse(k));
        }
        row /= max;
    }
    Ok(s)
}

/// Starting spectra, `p x m`, non-negative with row maxima of one.
pub fn initial_estimate<T: Real>(d: &DMatrix<T>, p: usize, method: &InitMethod<T>, seed: u64) -> Result<DMatrix<T>> {
    let (n, m) = d.shape();
    if p == 0 || p > m || p > n {
        return Err(Error::InvalidParameter(format!("component count {p} must lie in 1..={}", m.min(n))));
    }
    let rows = match method {
        InitMethod::Provided(s0) => {
            if s0.shape() != (p, m) {
                return Err(Error::DimensionMismatch(format!("initial spectra are {:?}, expected ({p}, {m})", s0.shape())));
            }
            s0.clone()
        }
        InitMethod::RandomRows => {
            let candidates: Vec<usize> = (0..n).filter(|&i| d.row(i).iter().any(|&v| v > T::zero())).collect();
            if candidates.len() < p {
                return Err(Error::InvalidParameter(format!("only {} scans have positive entries", candidates.len())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks: Vec<usize> =
                rand::seq::index::sample(&mut rng, candidates.len(), p).into_iter().map(|i| candidates[i]).collect();
            picks.sort_unstable();
            DMatrix::from_fn(p, m, |k, j| d[(picks[k], j)])
        }
        InitMethod::PurestRows => {
            let picks = successive_projections(d, p);
            if picks.len() < p {
                return Err(Error::InvalidParameter("data has fewer independent scans than components".into()));
            }
            DMatrix::from_fn(p, m, |k, j| d[(picks[k], j)])
        }
    };
    normalize_rows(rows).map_err(|e| match e {
        Error::ComponentCollapse(k) => Error::InvalidParameter(format!("initial spectrum {k} has no positive entry")),
        other => other,
    })
}

fn successive_projections<T: Real>(d: &DMatrix<T>, p: usize) -> Vec<usize> {
    let norms: Vec<T> = d.row_iter().map(|r| r.norm()).collect();
    let top = norms.iter().fold(T::zero(), |a, &b| a.max(b));
    // low-signal scans are mostly noise once normalized
    let keep: Vec<usize> = (0..d.nrows()).filter(|&i| norms[i] > T::lit(0.05) * top).collect();
    let mut work: Vec<DVector<T>> = keep.iter().map(|&i| d.row(i).transpose() / norms[i]).collect();
    if work.is_empty() {
        return Vec::new();
    }
    let rows = work.clone();
    let mean = work.iter().fold(DVector::zeros(d.ncols()), |acc, v| acc + v) / T::lit(work.len() as f64);
    let project_out = |work: &mut Vec<DVector<T>>, dir: &DVector<T>| {
        let nn = dir.norm_squared();
        if nn > T::zero() {
            for w in work.iter_mut() {
                let c = w.dot(dir) / nn;
                w.axpy(-c, dir, T::one());
            }
        }
    };
    let farthest = |work: &[DVector<T>]| {
        work.iter().enumerate().fold((0, T::zero()), |(bi, bn), (i, w)| {
            let n = w.norm();
            if n > bn { (i, n) } else { (bi, bn) }
        })
    };
    // the first pick is the scan least like the average one; later picks are
    // the scans least explained by the span of those already chosen
    project_out(&mut work, &mean);
    let (first, _) = farthest(&work);
    let mut picks = vec![keep[first]];
    let mut work = rows;
    let mut basis: Vec<DVector<T>> = Vec::new();
    let mut dir = work[first].clone();
    while picks.len() < p {
        for b in &basis {
            let c = dir.dot(b) / b.norm_squared();
            dir.axpy(-c, b, T::one());
        }
        project_out(&mut work, &dir);
        basis.push(dir);
        let (best, best_norm) = farthest(&work);
        if best_norm <= T::lit(1e-9) {
            break;
        }
        picks.push(keep[best]);
        dir = work[best].clone();
    }
    picks.sort_unstable();
    picks
}

/// Alternating least squares: NNLS for each scan's concentrations, then a
/// non-negative (optionally penalized) fit of each channel's spectral column.
/// Spectra are renormalized to max one after every iteration, with the
/// concentrations scaled to compensate.
pub fn mcr_als<T: Real>(d: &DMatrix<T>, s0: &DMatrix<T>, penalty: &PenaltySpec, opts: &McrOptions) -> Result<McrResult<T>> {
    penalty.validate()?;
    if !(opts.epsilon > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("epsilon must be positive and max_iter non-zero".into()));
    }
    let (n, m) = d.shape();
    let p = s0.nrows();
    if s0.ncols() != m || p == 0 {
        return Err(Error::DimensionMismatch(format!("spectra are {:?}, data has {m} channels", s0.shape())));
    }
    let mut s = s0.clone();
    let mut c = DMatrix::zeros(n, p);
    let mut trace: Vec<T> = Vec::new();
    let floor = T::lit(opts.epsilon) * T::default_epsilon() * frobenius_sq(d);
    let eps = T::lit(opts.epsilon);
    let col_norms: Vec<T> = d.column_iter().map(|col| col.norm_squared()).collect();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;

        let gram = &s * s.transpose();
        let proj = &s * d.transpose();
        for i in 0..n {
            let ci = nnls_gram(&gram, &proj.column(i).into_owned());
            c.row_mut(i).copy_from(&ci.transpose());
        }
        if let Some(k) = (0..p).find(|&k| c.column(k).iter().all(|&v| v <= T::zero())) {
            return Err(Error::ComponentCollapse(k));
        }

        if penalty.is_unpenalized() {
            let gram = c.transpose() * &c;
            let proj = c.transpose() * d;
            for j in 0..m {
                s.column_mut(j).copy_from(&nnls_gram(&gram, &proj.column(j).into_owned()));
            }
        } else {
            // The penalty acts on spectra expressed against unit-norm
            // concentration columns, so every component is shrunk on the same
            // scale whatever its intensity.
            let norms: Vec<T> = c.column_iter().map(|col| col.norm()).collect();
            let mut cu = c.clone();
            for (k, &nk) in norms.iter().enumerate() {
                cu.column_mut(k).unscale_mut(nk);
            }
            let gram = cu.transpose() * &cu;
            let proj = cu.transpose() * d;
            for j in 0..m {
                let warm = DVector::from_fn(p, |k, _| s[(k, j)] * norms[k]);
                let opts = ElasticNetOptions { warm_start: Some(warm), ..ElasticNetOptions::nonneg() };
                let sj = elastic_net_gram(&gram, &proj.column(j).into_owned(), col_norms[j], penalty, &opts)?.x;
                for k in 0..p {
                    s[(k, j)] = sj[k] / norms[k];
                }
            }
        }
        for k in 0..p {
            let max = s.row(k).max();
            if max <= T::zero() {
                return Err(Error::ComponentCollapse(k));
            }
            s.row_mut(k).unscale_mut(max);
            c.column_mut(k).scale_mut(max);
        }

        let current = ssq(d, &(&c * &s))?;
        let prev = trace.last().copied();
        trace.push(current);
        if let Some(prev) = prev {
            if (prev - current).abs() < eps * current + floor {
                converged = true;
                break;
            }
        }
    }
    Ok(McrResult { c, s, ssq_trace: trace, converged, iterations, penalty: *penalty })
}

/// `max |C^T D|`, the natural scale for the spectral penalty weight.
pub fn lambda_scale<T: Real>(d: &DMatrix<T>, c: &DMatrix<T>) -> T {
    (c.transpose() * d).iter().fold(T::zero(), |a, v| a.max(v.abs()))
}

/// Cosine similarity of each true spectrum with its best-matching estimate,
/// maximizing the mean over all assignments of estimates to components.
pub fn match_spectra<T: Real>(s_est: &DMatrix<T>, s_true: &DMatrix<T>) -> Result<Vec<f64>> {
    if s_est.shape() != s_true.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", s_est.shape(), s_true.shape())));
    }
    let p = s_true.nrows();
    let cos = |a: usize, b: usize| {
        let x = s_est.row(a);
        let y = s_true.row(b);
        let denom = x.norm() * y.norm();
        if denom > T::zero() { (x.dot(&y) / denom).to_f64_lossy() } else { 0.0 }
    };
    let table: Vec<Vec<f64>> = (0..p).map(|a| (0..p).map(|b| cos(a, b)).collect()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut perm: Vec<usize> = (0..p).collect();
    permutations(&mut perm, 0, &mut |perm| {
        let per: Vec<f64> = (0..p).map(|b| table[perm[b]][b]).collect();
        let total: f64 = per.iter().sum();
        if best.as_ref().is_none_or(|(t, _)| total > *t) {
            best = Some((total, per));
        }
    });
    Ok(best.map(|(_, v)| v).unwrap_or_default())
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::Scenario;
    use proptest::prelude::*;

    fn argmax(row: nalgebra::DVectorView<f64>) -> usize {
        row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
    }

    #[test]
    fn provided_init_is_normalized() {
        let data = Scenario::TwoCompPlain.dataset::<f64>(0.0, 0).unwrap();
        let scaled = &data.s_true * 3.5;
        let s0 = initial_estimate(&data.d, 2, &InitMethod::Provided(scaled), 0).unwrap();
        assert!((s0 - &data.s_true).amax() < 1e-15);
    }

    #[test]
    fn random_rows_are_seeded() {
        let data = Scenario::TwoCompOverlap.dataset::<f64>(0.001, 1).unwrap();
        let a = initial_estimate(&data.d, 2, &InitMethod::RandomRows, 9).unwrap();
        let b = initial_estimate(&data.d, 2, &InitMethod::RandomRows, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v >= 0.0));
        for k in 0..2 {
            assert_eq!(a.row(k).max(), 1.0);
        }
    }

    #[test]
    fn purest_rows_separate_the_plain_components() {
        let data = Scenario::TwoCompPlain.dataset::<f64>(0.0, 0).unwrap();
        let s0 = initial_estimate(&data.d, 2, &InitMethod::PurestRows, 0).unwrap();
        let mut found: Vec<usize> = (0..2).map(|k| argmax(s0.row(k).transpose().as_view())).collect();
        let mut expected: Vec<usize> = (0..2).map(|k| argmax(data.s_true.row(k).transpose().as_view())).collect();
        found.sort_unstable();
        expected.sort_unstable();
        assert_eq!(found, expected);
    }

    #[test]
    fn too_many_components_rejected() {
        let d = DMatrix::from_element(3, 2, 1.0);
        assert!(initial_estimate(&d, 3, &InitMethod::<f64>::RandomRows, 0).is_err());
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let data = Scenario::TwoCompPlain.dataset::<f64>(0.0, 0).unwrap();
        let r = mcr_als(&data.d, &data.s_true, &PenaltySpec::none(), &McrOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 3, "{} iterations", r.iterations);
        assert!(r.final_ssq() < 1e-12 * frobenius_sq(&data.d));
        let cos = match_spectra(&r.s, &data.s_true).unwrap();
        assert!(cos.iter().all(|&c| c > 0.9999), "{cos:?}");
    }

    #[test]
    fn reruns_are_identical() {
        let data = Scenario::TwoCompOverlap.dataset::<f64>(0.002, 3).unwrap();
        let s0 = initial_estimate(&data.d, 2, &InitMethod::RandomRows, 5).unwrap();
        let a = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions::default()).unwrap();
        let b = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_ends_at_reconstruction_ssq() {
        let data = Scenario::ThreeCompOverlap.dataset::<f64>(0.001, 2).unwrap();
        let s0 = initial_estimate(&data.d, 3, &InitMethod::PurestRows, 0).unwrap();
        let r = mcr_als(&data.d, &s0, &PenaltySpec::lasso(0.01), &McrOptions::default()).unwrap();
        assert_eq!(r.final_ssq(), ssq(&data.d, &(&r.c * &r.s)).unwrap());
        for k in 0..3 {
            assert_eq!(r.s.row(k).max(), 1.0);
        }
        assert!(r.c.iter().chain(r.s.iter()).all(|&v| v >= 0.0));
    }

    #[test]
    fn lasso_does_not_raise_l1_on_overlap() {
        let data = Scenario::TwoCompOverlap.dataset::<f64>(0.0, 0).unwrap();
        let s0 = initial_estimate(&data.d, 2, &InitMethod::PurestRows, 0).unwrap();
        let plain = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions::default()).unwrap();
        let scale = lambda_scale(&data.d, &plain.c);
        let lasso = mcr_als(&data.d, &s0, &PenaltySpec::lasso(1e-3 * scale), &McrOptions::default()).unwrap();
        assert!(lasso.spectra_l1() <= plain.spectra_l1() + 1e-9);
    }

    #[test]
    fn l1_is_monotone_over_a_lambda_ladder() {
        let data = Scenario::TwoCompOverlap.dataset::<f64>(0.0, 0).unwrap();
        let s0 = initial_estimate(&data.d, 2, &InitMethod::PurestRows, 0).unwrap();
        let plain = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions::default()).unwrap();
        let scale = lambda_scale(&data.d, &plain.c);
        let mut last = f64::INFINITY;
        for f in [0.0, 1e-4, 3e-4, 1e-3, 3e-3] {
            let r = mcr_als(&data.d, &s0, &PenaltySpec::lasso(f * scale), &McrOptions::default()).unwrap();
            let l1 = r.spectra_l1();
            assert!(l1 <= last + 1e-8, "lambda factor {f}: {l1} > {last}");
            last = l1;
        }
    }

    #[test]
    fn collapse_is_reported() {
        // the second starting spectrum sees nothing in the data
        let d = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
        let s0 = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let err = mcr_als(&d, &s0, &PenaltySpec::none(), &McrOptions::default()).unwrap_err();
        assert_eq!(err, Error::ComponentCollapse(1));
    }

    #[test]
    fn spectra_matching_handles_permutation() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.2, 0.0, 1.0, 0.0]);
        let swapped = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.2]);
        let cos = match_spectra(&swapped, &s).unwrap();
        assert!(cos.iter().all(|&c| (c - 1.0).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn unpenalized_trace_never_rises(seed in 0u64..1000, noise in 0.0f64..0.01) {
            let data = Scenario::TwoCompOverlap.dataset::<f64>(noise, seed).unwrap();
            let s0 = initial_estimate(&data.d, 2, &InitMethod::RandomRows, seed).unwrap();
            let r = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions { max_iter: 60, ..Default::default() }).unwrap();
            for w in r.ssq_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn normalization_preserves_product(seed in 0u64..1000) {
            let data = Scenario::ThreeCompPlain.dataset::<f64>(0.001, seed).unwrap();
            let s0 = initial_estimate(&data.d, 3, &InitMethod::RandomRows, seed).unwrap();
            let r = mcr_als(&data.d, &s0, &PenaltySpec::none(), &McrOptions { max_iter: 5, ..Default::default() }).unwrap();
            // undo and redo the normalization with an arbitrary rescale
            let scales = DVector::from_fn(3, |k, _| 0.3 + k as f64);
            let mut c2 = r.c.clone();
            let mut s2 = r.s.clone();
            for k in 0..3 {
                s2.row_mut(k).scale_mut(scales[k]);
                c2.column_mut(k).unscale_mut(scales[k]);
            }
            prop_assert!((&c2 * &s2 - &r.c * &r.s).amax() < 1e-10);
        }
    }
}
