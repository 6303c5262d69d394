//! Areas of feasible solutions: exhaustive `(t12, t21)` grids for two
//! components and `(t12, t13)` grids with an inner simplex search over the
//! remaining rotation elements for three.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{realize_t, rotate, RotationSpec, SvdFactor};
use crate::scalar::Real;
use crate::solvers::{nelder_mead, SimplexOptions};

/// `log_ssq` reported for cells whose rotation is singular.
pub const DEGENERATE_LOG_SSQ: f64 = 99.0;

/// Relative scale of the floor added inside the logarithm: `1e-16 ||D||^2`.
pub const FLOOR_RATIO: f64 = 1e-16;

pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, steps: usize) -> Self {
        Self { min, max, steps }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.steps - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.steps {
            self.max
        } else {
            self.min + self.step() * i as f64
        }
    }

    /// Fractional lattice index of `v`.
    pub fn position(&self, v: f64) -> f64 {
        (v - self.min) / self.step()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::InvalidParameter(format!("grid axis {name}: need finite min < max, got [{}, {}]", self.min, self.max)));
        }
        if self.steps < 2 {
            return Err(Error::InvalidParameter(format!("grid axis {name}: steps must be >= 2, got {}", self.steps)));
        }
        Ok(())
    }
}

/// Lattice over the two grid coordinates. Axis `a` is `t12`; axis `b` is
/// `t21` for two components and `t13` for three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub a: GridAxis,
    pub b: GridAxis,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.a.validate("a")?;
        self.b.validate("b")?;
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParameter(format!("feasibility tol must be finite and >= 0, got {}", self.tol)));
        }
        Ok(())
    }

    /// Same box with both axes exchanged.
    pub fn transposed(&self) -> Self {
        Self { a: self.b, b: self.a, tol: self.tol }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell<T: Real> {
    pub a: f64,
    pub b: f64,
    pub log_ssq: f64,
    pub feasible: bool,
    /// `[t22, t23, t32, t33]` chosen by the inner search (three components only).
    pub inner_t: Option<[f64; 4]>,
    /// Clipped spectra with row maxima of one; only kept for feasible cells.
    pub s_rows: Option<DMatrix<T>>,
    /// Per-component `L_x` values keyed by exponent.
    pub lx_cache: Vec<(f64, Vec<f64>)>,
}

impl<T: Real> GridCell<T> {
    pub fn cached_lx(&self, x: f64) -> Option<&[f64]> {
        self.lx_cache.iter().find(|(k, _)| *k == x).map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfsGrid<T: Real> {
    pub spec: GridSpec,
    pub p: usize,
    /// Fingerprint of the factor the grid was computed from.
    pub factor_hash: String,
    /// `log10` of the residual floor; noiseless plateaus sit here.
    pub floor_log: f64,
    /// Inner search settings (three components only).
    pub simplex: Option<SimplexOptions>,
    /// Row-major: `cells[ib * a.steps + ia]`.
    pub cells: Vec<GridCell<T>>,
}

impl<T: Real> AfsGrid<T> {
    /// `(rows, cols)` = `(b.steps, a.steps)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.spec.b.steps, self.spec.a.steps)
    }

    pub fn cell(&self, ib: usize, ia: usize) -> &GridCell<T> {
        &self.cells[ib * self.spec.a.steps + ia]
    }

    pub fn feasible_count(&self) -> usize {
        self.cells.iter().filter(|c| c.feasible).count()
    }

    /// Nearest lattice point to `(a, b)`, or `None` if it lies more than half
    /// a step outside the box.
    pub fn nearest_cell(&self, a: f64, b: f64) -> Option<(usize, usize)> {
        let pa = self.spec.a.position(a).round();
        let pb = self.spec.b.position(b).round();
        let (rows, cols) = self.shape();
        if !(pa >= 0.0 && pb >= 0.0 && pa < cols as f64 && pb < rows as f64) {
            return None;
        }
        Some((pb as usize, pa as usize))
    }

    /// Fills every feasible cell's `L_x` cache for the given exponents.
    pub fn cache_norms(&mut self, xs: &[f64], zero_tol: f64) -> Result<()> {
        for &x in xs {
            crate::norms::check_exponent(x)?;
        }
        for cell in self.cells.iter_mut() {
            let Some(s) = &cell.s_rows else { continue };
            for &x in xs {
                if cell.cached_lx(x).is_none() {
                    let vals = s.row_iter().map(|r| crate::norms::lx_norm_row(r.iter().copied(), x, zero_tol)).collect();
                    cell.lx_cache.push((x, vals));
                }
            }
        }
        Ok(())
    }

    /// Connected components of the feasible cells under 4-connectivity,
    /// labeled in row-major order of their first cell.
    pub fn regions(&self) -> Regions {
        let (rows, cols) = self.shape();
        let mut labels = vec![None; rows * cols];
        let mut sizes = Vec::new();
        for start in 0..rows * cols {
            if !self.cells[start].feasible || labels[start].is_some() {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            labels[start] = Some(id);
            while let Some(idx) = queue.pop_front() {
                size += 1;
                let (r, c) = (idx / cols, idx % cols);
                let mut push = |rr: usize, cc: usize| {
                    let j = rr * cols + cc;
                    if self.cells[j].feasible && labels[j].is_none() {
                        labels[j] = Some(id);
                        queue.push_back(j);
                    }
                };
                if r > 0 {
                    push(r - 1, c);
                }
                if r + 1 < rows {
                    push(r + 1, c);
                }
                if c > 0 {
                    push(r, c - 1);
                }
                if c + 1 < cols {
                    push(r, c + 1);
                }
            }
            sizes.push(size);
        }
        Regions { rows, cols, labels, sizes }
    }

    /// `max - min` of `log_ssq` over feasible cells.
    pub fn plateau_spread(&self) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().filter(|c| c.feasible).map(|c| c.log_ssq).collect();
        if vals.is_empty() {
            return None;
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(hi - lo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    pub rows: usize,
    pub cols: usize,
    /// Region id per cell, row-major; `None` for infeasible cells.
    pub labels: Vec<Option<usize>>,
    pub sizes: Vec<usize>,
}

impl Regions {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn label(&self, ib: usize, ia: usize) -> Option<usize> {
        self.labels[ib * self.cols + ia]
    }

    /// Region of the cell at `(ib, ia)`, or of the closest labeled cell at
    /// most one step away (row-major order breaks ties).
    pub fn label_near(&self, ib: usize, ia: usize) -> Option<usize> {
        if let Some(l) = self.label(ib, ia) {
            return Some(l);
        }
        let mut best: Option<(usize, usize)> = None;
        for r in ib.saturating_sub(1)..=(ib + 1).min(self.rows - 1) {
            for c in ia.saturating_sub(1)..=(ia + 1).min(self.cols - 1) {
                if let Some(l) = self.label(r, c) {
                    let d = r.abs_diff(ib) + c.abs_diff(ia);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, l));
                    }
                }
            }
        }
        best.map(|(_, l)| l)
    }

    /// Cells of region `id` as `(ib, ia)`.
    pub fn cells_of(&self, id: usize) -> Vec<(usize, usize)> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == Some(id))
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }
}

/// True iff both matrices are non-negative up to `tol` times their largest entry.
pub fn feasibility<T: Real>(c_hat: &DMatrix<T>, s_hat: &DMatrix<T>, tol: f64) -> bool {
    let ok = |m: &DMatrix<T>| {
        let (lo, hi) = m.iter().fold((T::zero(), T::zero()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        lo.to_f64_lossy() >= -tol * hi.to_f64_lossy()
    };
    ok(c_hat) && ok(s_hat)
}

/// Flips component `k` in both factors whenever the largest-magnitude entry
/// of its spectrum is negative. The product is unchanged.
pub fn canonicalize_signs<T: Real>(c_hat: &mut DMatrix<T>, s_hat: &mut DMatrix<T>) {
    for k in 0..s_hat.nrows() {
        let row = s_hat.row(k);
        let lead = row.iter().fold(T::zero(), |best, &v| if v.abs() > best.abs() { v } else { best });
        if lead < T::zero() {
            s_hat.row_mut(k).neg_mut();
            c_hat.column_mut(k).neg_mut();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellObjective<T: Real> {
    pub log_ssq: f64,
    /// Rotated profiles after sign canonicalization (not clipped).
    pub c_hat: DMatrix<T>,
    pub s_hat: DMatrix<T>,
}

/// The residual floor `FLOOR_RATIO * ||D||^2` for a factor.
pub fn floor_eps<T: Real>(factor: &SvdFactor<T>) -> f64 {
    FLOOR_RATIO * factor.data_norm_sq().to_f64_lossy()
}

/// Rotates the factor, zeroes negative entries and returns
/// `log10(ssq(D, C+ S+) + floor)` with the unclipped profiles.
pub fn cell_objective<T: Real>(factor: &SvdFactor<T>, t: &DMatrix<T>) -> Result<CellObjective<T>> {
    let (mut c_hat, mut s_hat) = rotate(factor, t)?;
    canonicalize_signs(&mut c_hat, &mut s_hat);
    let log_ssq = clipped_log_ssq(factor, &c_hat, &s_hat, floor_eps(factor));
    Ok(CellObjective { log_ssq, c_hat, s_hat })
}

fn clipped_log_ssq<T: Real>(factor: &SvdFactor<T>, c_hat: &DMatrix<T>, s_hat: &DMatrix<T>, floor: f64) -> f64 {
    let c_plus = c_hat.map(|v| v.max(T::zero()));
    let s_plus = s_hat.map(|v| v.max(T::zero()));
    let recon = c_plus * s_plus;
    let ssq = factor.data.iter().zip(recon.iter()).fold(0.0f64, |acc, (&d, &r)| {
        let e = (d - r).to_f64_lossy();
        acc + e * e
    });
    (ssq + floor).log10()
}

fn normalized_rows<T: Real>(s_hat: &DMatrix<T>) -> Option<DMatrix<T>> {
    let mut s = s_hat.map(|v| v.max(T::zero()));
    for k in 0..s.nrows() {
        let max = s.row(k).max();
        if max <= T::zero() {
            return None;
        }
        s.row_mut(k).unscale_mut(max);
    }
    Some(s)
}

fn evaluate_cell<T: Real>(factor: &SvdFactor<T>, spec: &RotationSpec<T>, tol: f64) -> GridCell<T> {
    let (a, b) = spec.grid_coords();
    let inner_t = match spec {
        RotationSpec::Three { inner, .. } => Some(inner.map(|v| v.to_f64_lossy())),
        RotationSpec::Two { .. } => None,
    };
    let mut cell = GridCell {
        a: a.to_f64_lossy(),
        b: b.to_f64_lossy(),
        log_ssq: DEGENERATE_LOG_SSQ,
        feasible: false,
        inner_t,
        s_rows: None,
        lx_cache: Vec::new(),
    };
    if let Ok(obj) = cell_objective(factor, &realize_t(spec)) {
        cell.log_ssq = obj.log_ssq;
        if feasibility(&obj.c_hat, &obj.s_hat, tol) {
            cell.s_rows = normalized_rows(&obj.s_hat);
            cell.feasible = cell.s_rows.is_some();
        }
    }
    cell
}

fn check_p<T: Real>(factor: &SvdFactor<T>, p: usize) -> Result<()> {
    if factor.p() != p {
        return Err(Error::InvalidParameter(format!("this grid needs a {p}-component factor, got {}", factor.p())));
    }
    Ok(())
}

/// Evaluates every `(t12, t21)` lattice point.
pub fn afs_grid_2comp<T: Real>(factor: &SvdFactor<T>, spec: &GridSpec) -> Result<AfsGrid<T>> {
    check_p(factor, 2)?;
    spec.validate()?;
    let cells: Vec<GridCell<T>> = (0..spec.b.steps)
        .into_par_iter()
        .flat_map_iter(|ib| {
            let t21 = T::lit(spec.b.value(ib));
            (0..spec.a.steps).map(move |ia| {
                evaluate_cell(factor, &RotationSpec::Two { t12: T::lit(spec.a.value(ia)), t21 }, spec.tol)
            })
        })
        .collect();
    finish(factor, *spec, None, cells)
}

fn finish<T: Real>(
    factor: &SvdFactor<T>,
    spec: GridSpec,
    simplex: Option<SimplexOptions>,
    cells: Vec<GridCell<T>>,
) -> Result<AfsGrid<T>> {
    if !cells.iter().any(|c| c.feasible) {
        return Err(Error::EmptyAfs);
    }
    Ok(AfsGrid {
        spec,
        p: factor.p(),
        factor_hash: factor.fingerprint(),
        floor_log: floor_eps(factor).log10(),
        simplex,
        cells,
    })
}

/// `{t : v + t w >= -slack}` over the entries that matter, as `(lo, hi)`.
fn nonneg_interval(v: &[f64], w: &[f64], slack: f64) -> (f64, f64) {
    let scale = v.iter().chain(w).fold(0.0f64, |m, x| m.max(x.abs()));
    let cut = 1e-10 * scale;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (&vi, &wi) in v.iter().zip(w) {
        if wi > cut {
            lo = lo.max(-(vi + slack) / wi);
        } else if wi < -cut {
            hi = hi.min(-(vi + slack) / wi);
        }
    }
    (lo, hi)
}

fn padded(lo: f64, hi: f64, pad: f64) -> Result<(f64, f64)> {
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "cannot derive a bounded grid box (interval [{lo}, {hi}]); supply explicit bounds or raise the feasibility tol"
        )));
    }
    let w = (hi - lo) * pad;
    Ok((lo - w, hi + w))
}

/// Box that must contain every feasible `(t12, t21)`: the spectrum in row one
/// bounds `t12`, the concentration profile in column one bounds `t21`. Entries
/// may dip to `-tol` times the largest factor entry, so noisy data still get a box.
pub fn default_grid_2comp<T: Real>(factor: &SvdFactor<T>, steps: usize, tol: f64) -> Result<GridSpec> {
    check_p(factor, 2)?;
    let col = |m: &DMatrix<T>, k: usize| -> Vec<f64> { m.column(k).iter().map(|v| v.to_f64_lossy()).collect() };
    let (v1, v2) = (col(&factor.loadings, 0), col(&factor.loadings, 1));
    let (u1, u2) = (col(&factor.scores, 0), col(&factor.scores, 1));
    let slack = |a: &[f64], b: &[f64]| tol * a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let (a_lo, a_hi) = nonneg_interval(&v1, &v2, slack(&v1, &v2));
    // u1 - t u2 >= 0
    let neg_u2: Vec<f64> = u2.iter().map(|x| -x).collect();
    let (b_lo, b_hi) = nonneg_interval(&u1, &neg_u2, slack(&u1, &u2));
    let (a_lo, a_hi) = padded(a_lo, a_hi, 0.05)?;
    let (b_lo, b_hi) = padded(b_lo, b_hi, 0.05)?;
    Ok(GridSpec { a: GridAxis::new(a_lo, a_hi, steps), b: GridAxis::new(b_lo, b_hi, steps), tol })
}

fn touches_border<T: Real>(grid: &AfsGrid<T>) -> bool {
    let (rows, cols) = grid.shape();
    (0..rows).any(|r| (0..cols).any(|c| (r == 0 || c == 0 || r + 1 == rows || c + 1 == cols) && grid.cell(r, c).feasible))
}

/// [`afs_grid_2comp`] on [`default_grid_2comp`], widening the box by half its
/// width (up to four times) while any feasible cell sits on the border.
pub fn afs_grid_2comp_auto<T: Real>(factor: &SvdFactor<T>, steps: usize, tol: f64) -> Result<AfsGrid<T>> {
    let mut spec = default_grid_2comp(factor, steps, tol)?;
    let mut grid = afs_grid_2comp(factor, &spec)?;
    for _ in 0..4 {
        if !touches_border(&grid) {
            break;
        }
        let widen = |ax: GridAxis| {
            let w = (ax.max - ax.min) * 0.25;
            GridAxis::new(ax.min - w, ax.max + w, ax.steps)
        };
        spec = GridSpec { a: widen(spec.a), b: widen(spec.b), tol };
        grid = afs_grid_2comp(factor, &spec)?;
    }
    Ok(grid)
}

/// The permutation of a two-component rotation: exchanging the rows of
/// `[[1, t12], [t21, 1]]` and renormalizing gives `(1/t21, 1/t12)`.
pub fn swap_components_2comp(t12: f64, t21: f64) -> (f64, f64) {
    (1.0 / t21, 1.0 / t12)
}

/// Vertices of the polygon `{(x, y) : V (1, x, y) >= -tol * max|V|}` (every
/// non-negative spectrum in the span of the loadings, scaled to unit first
/// coordinate, up to the feasibility tolerance), in counter-clockwise order.
pub fn spectral_cone_vertices<T: Real>(factor: &SvdFactor<T>, tol: f64) -> Result<Vec<[f64; 2]>> {
    check_p(factor, 3)?;
    let mut v: Vec<[f64; 3]> = factor
        .loadings
        .row_iter()
        .map(|r| [r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy()])
        .collect();
    let scale = v.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    for r in v.iter_mut() {
        r[0] += tol * scale;
    }
    let rows: Vec<[f64; 3]> = v.into_iter().filter(|r| r[0].hypot(r[1]).hypot(r[2]) > 1e-9 * scale).collect();
    let inside = |x: f64, y: f64| {
        let slack = 1e-9 * scale * (1.0 + x.abs() + y.abs());
        rows.iter().all(|r| r[0] + r[1] * x + r[2] * y >= -slack)
    };
    let mut verts: Vec<[f64; 2]> = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let (a, b) = (rows[i], rows[j]);
            let det = a[1] * b[2] - a[2] * b[1];
            if det.abs() < 1e-12 * scale * scale {
                continue;
            }
            let x = (-a[0] * b[2] + a[2] * b[0]) / det;
            let y = (-a[1] * b[0] + a[0] * b[1]) / det;
            if inside(x, y) && !verts.iter().any(|p| (p[0] - x).abs() + (p[1] - y).abs() < 1e-9 * (1.0 + x.abs() + y.abs())) {
                verts.push([x, y]);
            }
        }
    }
    if verts.len() < 3 {
        return Err(Error::InvalidParameter(
            "non-negative spectral cone is degenerate or unbounded; supply explicit bounds or raise the feasibility tol".into(),
        ));
    }
    let cx = verts.iter().map(|p| p[0]).sum::<f64>() / verts.len() as f64;
    let cy = verts.iter().map(|p| p[1]).sum::<f64>() / verts.len() as f64;
    verts.sort_by(|p, q| (p[1] - cy).atan2(p[0] - cx).total_cmp(&(q[1] - cy).atan2(q[0] - cx)));
    Ok(verts)
}

/// Bounding box of the spectral cone polygon, padded by 5%.
pub fn default_grid_3comp<T: Real>(factor: &SvdFactor<T>, steps: usize, tol: f64) -> Result<GridSpec> {
    let verts = spectral_cone_vertices(factor, tol)?;
    let lo_hi = |k: usize| {
        let lo = verts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = verts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        padded(lo, hi, 0.05)
    };
    let (a_lo, a_hi) = lo_hi(0)?;
    let (b_lo, b_hi) = lo_hi(1)?;
    Ok(GridSpec { a: GridAxis::new(a_lo, a_hi, steps), b: GridAxis::new(b_lo, b_hi, steps), tol })
}

impl Default for InnerSearch {
    fn default() -> Self {
        Self { max_vertex_seeds: 10, vertex_pull: 0.02, outside_budget: 0.1 }
    }
}

/// Tuning of the three-component inner search beyond the simplex options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerSearch {
    /// Cone vertices considered when seeding rows two and three.
    pub max_vertex_seeds: usize,
    /// Seeds sit this fraction of the way from each vertex to the centroid,
    /// so seeded completions are interior points rather than boundary ones.
    pub vertex_pull: f64,
    /// Fraction of the simplex budget spent on cells whose first row is
    /// itself infeasible (such cells can never be feasible).
    pub outside_budget: f64,
}

/// Simplex settings for the three-component inner search: a looser budget
/// than [`SimplexOptions::default`] with one restart.
pub fn inner_simplex_defaults() -> SimplexOptions {
    SimplexOptions { max_iter: 600, x_tol: 1e-7, f_tol: 1e-7, restarts: 1, seed: 0, f_target: None }
}

/// Three-component grid: for every `(t12, t13)` the four remaining elements
/// are chosen by Nelder-Mead on the clipped `log_ssq`.
///
/// Seeds, in priority order: pairs of spectral cone vertices (pairs avoiding
/// the vertex closest to row one first), then the left neighbor's optimum. A
/// seed already on the residual floor is accepted as is; otherwise the
/// simplex starts from the best seed. Rows are processed in parallel and each
/// row left to right, so the result does not depend on the thread count.
pub fn afs_grid_3comp<T: Real>(factor: &SvdFactor<T>, spec: &GridSpec, opts: &SimplexOptions) -> Result<AfsGrid<T>> {
    afs_grid_3comp_with(factor, spec, opts, &InnerSearch::default())
}

pub fn afs_grid_3comp_with<T: Real>(
    factor: &SvdFactor<T>,
    spec: &GridSpec,
    opts: &SimplexOptions,
    search: &InnerSearch,
) -> Result<AfsGrid<T>> {
    check_p(factor, 3)?;
    spec.validate()?;
    opts.validate()?;
    let mut verts = spectral_cone_vertices(factor, spec.tol).unwrap_or_default();
    verts.truncate(search.max_vertex_seeds);
    if !verts.is_empty() {
        let n = verts.len() as f64;
        let cx = verts.iter().map(|v| v[0]).sum::<f64>() / n;
        let cy = verts.iter().map(|v| v[1]).sum::<f64>() / n;
        for v in verts.iter_mut() {
            v[0] += search.vertex_pull * (cx - v[0]);
            v[1] += search.vertex_pull * (cy - v[1]);
        }
    }
    let floor = floor_eps(factor);
    let target = (factor.truncation_ssq.to_f64_lossy() + floor).log10() + 2f64.log10();
    let ctx = InnerContext { factor, tol: spec.tol, floor, target, verts: &verts, opts, search };

    let cells: Vec<GridCell<T>> = (0..spec.b.steps)
        .into_par_iter()
        .flat_map_iter(|ib| {
            let t13 = spec.b.value(ib);
            let mut left: Option<[f64; 4]> = None;
            let mut row = Vec::with_capacity(spec.a.steps);
            for ia in 0..spec.a.steps {
                let cell = ctx.solve(spec.a.value(ia), t13, left, (ib * spec.a.steps + ia) as u64);
                left = cell.inner_t.or(left);
                row.push(cell);
            }
            row
        })
        .collect();
    let mut simplex = opts.clone();
    simplex.f_target = Some(target);
    finish(factor, *spec, Some(simplex), cells)
}

struct InnerContext<'a, T: Real> {
    factor: &'a SvdFactor<T>,
    tol: f64,
    floor: f64,
    target: f64,
    verts: &'a [[f64; 2]],
    opts: &'a SimplexOptions,
    search: &'a InnerSearch,
}

impl<T: Real> InnerContext<'_, T> {
    fn spec(t12: f64, t13: f64, inner: &[f64]) -> RotationSpec<T> {
        RotationSpec::Three {
            t12: T::lit(t12),
            t13: T::lit(t13),
            inner: [T::lit(inner[0]), T::lit(inner[1]), T::lit(inner[2]), T::lit(inner[3])],
        }
    }

    fn objective(&self, t12: f64, t13: f64, inner: &[f64]) -> f64 {
        match rotate(self.factor, &realize_t(&Self::spec(t12, t13, inner))) {
            Ok((mut c, mut s)) => {
                canonicalize_signs(&mut c, &mut s);
                clipped_log_ssq(self.factor, &c, &s, self.floor)
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn row_one_feasible(&self, t12: f64, t13: f64) -> bool {
        let l = &self.factor.loadings;
        let row: Vec<f64> = (0..l.nrows())
            .map(|j| (l[(j, 0)] + T::lit(t12) * l[(j, 1)] + T::lit(t13) * l[(j, 2)]).to_f64_lossy())
            .collect();
        let hi = row.iter().cloned().fold(0.0f64, f64::max);
        let lo = row.iter().cloned().fold(0.0f64, f64::min);
        hi > 0.0 && lo >= -self.tol * hi
    }

    fn seeds(&self, t12: f64, t13: f64, left: Option<[f64; 4]>) -> Vec<[f64; 4]> {
        let verts = self.verts;
        let mut seeds = Vec::new();
        if verts.len() >= 2 {
            let nearest = (0..verts.len())
                .min_by(|&i, &j| {
                    let d = |k: usize| (verts[k][0] - t12).hypot(verts[k][1] - t13);
                    d(i).total_cmp(&d(j))
                })
                .unwrap_or(0);
            let mut pairs: Vec<(usize, usize)> = Vec::new();
            for i in 0..verts.len() {
                for j in (i + 1)..verts.len() {
                    pairs.push((i, j));
                }
            }
            pairs.sort_by_key(|&(i, j)| i == nearest || j == nearest);
            seeds.extend(pairs.into_iter().map(|(i, j)| [verts[i][0], verts[i][1], verts[j][0], verts[j][1]]));
        }
        if let Some(l) = left {
            seeds.push(l);
        }
        // generic fallback: rows two and three along the other loadings
        seeds.push([1.0, 0.0, 0.0, 1.0]);
        seeds
    }

    fn solve(&self, t12: f64, t13: f64, left: Option<[f64; 4]>, cell_id: u64) -> GridCell<T> {
        let f = |x: &[f64]| self.objective(t12, t13, x);
        let mut best: Option<([f64; 4], f64)> = None;
        for seed in self.seeds(t12, t13, left) {
            let v = f(&seed);
            if v <= self.target {
                best = Some((seed, v));
                break;
            }
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((seed, v));
            }
        }
        let inner = match best {
            None => None,
            Some((x, v)) if v <= self.target => Some(x),
            Some((x0, _)) => {
                let mut opts = self.opts.clone();
                opts.f_target = Some(self.target);
                opts.seed = self.opts.seed.wrapping_add(cell_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                if !self.row_one_feasible(t12, t13) {
                    opts.max_iter = ((opts.max_iter as f64 * self.search.outside_budget).ceil() as usize).max(1);
                    opts.restarts = 0;
                }
                match nelder_mead(f, &x0, &opts) {
                    Ok(r) => Some([r.x[0], r.x[1], r.x[2], r.x[3]]),
                    Err(_) => Some(x0),
                }
            }
        };
        match inner {
            Some(x) => evaluate_cell(self.factor, &Self::spec(t12, t13, &x), self.tol),
            None => GridCell {
                a: t12,
                b: t13,
                log_ssq: DEGENERATE_LOG_SSQ,
                feasible: false,
                inner_t: None,
                s_rows: None,
                lx_cache: Vec::new(),
            },
        }
    }
}

/// Grid coordinates of the true solution with each component in the first
/// row: `(t12, t21)` for two components (the other one in row two), the
/// normalized `(t12, t13)` of each row of the true rotation for three.
pub fn true_coords<T: Real>(factor: &SvdFactor<T>, c_true: &DMatrix<T>) -> Result<Vec<(f64, f64)>> {
    let t = factor.rotation_for_profiles(c_true)?;
    let t64 = t.map(|v| v.to_f64_lossy());
    match factor.p() {
        2 => {
            let (t12, t21) = match RotationSpec::from_matrix(&t64)? {
                RotationSpec::Two { t12, t21 } => (t12, t21),
                _ => unreachable!(),
            };
            Ok(vec![(t12, t21), swap_components_2comp(t12, t21)])
        }
        3 => (0..3)
            .map(|k| {
                if t64[(k, 0)] == 0.0 {
                    return Err(Error::InvalidParameter(format!("component {k} has no first-loading weight")));
                }
                Ok((t64[(k, 1)] / t64[(k, 0)], t64[(k, 2)] / t64[(k, 0)]))
            })
            .collect(),
        p => Err(Error::InvalidParameter(format!("true coordinates need 2 or 3 components, got {p}"))),
    }
}

/// Number of cells, relative to both regions together, whose image under the
/// component swap does not land next to the other region.
///
/// A mapped point counts as a hit when any corner of the lattice square
/// containing it belongs to the target region.
pub fn swap_mismatch_2comp<T: Real>(grid: &AfsGrid<T>, regions: &Regions, r1: usize, r2: usize) -> (usize, usize) {
    let hit = |a: f64, b: f64, target: usize| {
        let (pa, pb) = (grid.spec.a.position(a), grid.spec.b.position(b));
        if !(pa.is_finite() && pb.is_finite()) {
            return false;
        }
        let (fa, fb) = (pa.floor(), pb.floor());
        for db in 0..2 {
            for da in 0..2 {
                let (ia, ib) = (fa + da as f64, fb + db as f64);
                if ia >= 0.0 && ib >= 0.0 && (ia as usize) < regions.cols && (ib as usize) < regions.rows {
                    if regions.label(ib as usize, ia as usize) == Some(target) {
                        return true;
                    }
                }
            }
        }
        false
    };
    let mut miss = 0;
    for (from, to) in [(r1, r2), (r2, r1)] {
        for (ib, ia) in regions.cells_of(from) {
            let cell = grid.cell(ib, ia);
            let (a, b) = swap_components_2comp(cell.a, cell.b);
            if !hit(a, b, to) {
                miss += 1;
            }
        }
    }
    (miss, regions.sizes[r1] + regions.sizes[r2])
}

/// Largest `log_ssq` reached anywhere on the grid, ignoring degenerate cells.
pub fn max_log_ssq<T: Real>(grid: &AfsGrid<T>) -> f64 {
    grid.cells.iter().map(|c| c.log_ssq).filter(|&v| v < DEGENERATE_LOG_SSQ).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::truncated_svd;
    use crate::simkit::Scenario;
    use proptest::prelude::*;

    fn factor_of(sc: Scenario) -> (SvdFactor<f64>, DMatrix<f64>) {
        let ds = sc.dataset::<f64>(0.0, 7).unwrap();
        (truncated_svd(&ds.d, sc.n_components()).unwrap(), ds.c_true)
    }

    fn small_grid_3comp(factor: &SvdFactor<f64>, steps: usize) -> AfsGrid<f64> {
        let spec = default_grid_3comp(factor, steps, DEFAULT_TOL).unwrap();
        afs_grid_3comp(factor, &spec, &inner_simplex_defaults()).unwrap()
    }

    #[test]
    fn feasibility_examples() {
        let pos = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 3.0]);
        assert!(feasibility(&pos, &pos, DEFAULT_TOL));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, -0.1, 0.5, 0.2]);
        assert!(!feasibility(&pos, &neg, DEFAULT_TOL));
        assert!(!feasibility(&neg, &pos, DEFAULT_TOL));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, -0.5 * DEFAULT_TOL, 0.5, 0.2]);
        assert!(feasibility(&pos, &tiny, DEFAULT_TOL));
    }

    #[test]
    fn true_rotation_sits_on_the_floor() {
        for sc in Scenario::ALL {
            let (f, c_true) = factor_of(sc);
            let t = f.rotation_for_profiles(&c_true).unwrap();
            let t = realize_t(&RotationSpec::from_matrix(&t).unwrap());
            let obj = cell_objective(&f, &t).unwrap();
            let floor = floor_eps(&f).log10();
            assert!((obj.log_ssq - floor).abs() < 0.3, "{}: {} vs floor {}", sc.tag(), obj.log_ssq, floor);
            assert!(feasibility(&obj.c_hat, &obj.s_hat, DEFAULT_TOL), "{}", sc.tag());
        }
    }

    #[test]
    fn far_outside_cell_is_two_decades_above_the_floor() {
        let (f, _) = factor_of(Scenario::TwoCompPlain);
        let spec = default_grid_2comp(&f, 11, DEFAULT_TOL).unwrap();
        let t12 = spec.a.max + (spec.a.max - spec.a.min);
        let t21 = 0.5 * (spec.b.min + spec.b.max);
        let obj = cell_objective(&f, &realize_t(&RotationSpec::Two { t12, t21 })).unwrap();
        assert!(obj.log_ssq >= floor_eps(&f).log10() + 2.0, "{}", obj.log_ssq);
    }

    #[test]
    fn identity_rotation_clips_exactly_the_negative_scores() {
        // Loadings with disjoint non-negative supports and unit norm, so the
        // clipping residual is the sum of squared negative scores.
        let (n, m) = (6, 4);
        let mut loadings = DMatrix::zeros(m, 2);
        loadings[(0, 0)] = 0.6;
        loadings[(1, 0)] = 0.8;
        loadings[(2, 1)] = 1.0;
        let scores = DMatrix::from_row_slice(n, 2, &[3.0, 1.0, 2.0, -0.5, 1.0, 2.0, 0.5, -1.5, 2.5, 0.0, 1.0, -0.25]);
        let data = &scores * loadings.transpose();
        let f = SvdFactor { data, scores: scores.clone(), loadings, singular_values: vec![], truncation_ssq: 0.0 };
        let obj = cell_objective(&f, &DMatrix::identity(2, 2)).unwrap();
        let expected: f64 = scores.iter().filter(|v| **v < 0.0).map(|v| v * v).sum();
        let got = 10f64.powf(obj.log_ssq) - floor_eps(&f);
        assert!((got - expected).abs() < 1e-9 * expected, "{got} vs {expected}");
    }

    #[test]
    fn canonicalize_flips_negative_leads() {
        let mut c = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, -1.0]);
        let mut s = DMatrix::from_row_slice(2, 3, &[0.5, 1.0, 0.0, 0.2, -3.0, 0.1]);
        let before = &c * &s;
        canonicalize_signs(&mut c, &mut s);
        assert_eq!(s.row(1).iter().copied().collect::<Vec<_>>(), vec![-0.2, 3.0, -0.1]);
        assert_eq!(c.column(1).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0]);
        assert_eq!(&c * &s, before);
    }

    #[test]
    fn two_comp_grid_has_two_regions_and_truth_inside() {
        let (f, c_true) = factor_of(Scenario::TwoCompPlain);
        let grid = afs_grid_2comp_auto(&f, 101, DEFAULT_TOL).unwrap();
        let regions = grid.regions();
        assert_eq!(regions.count(), 2, "sizes {:?}", regions.sizes);
        let truth = true_coords(&f, &c_true).unwrap();
        let labels: Vec<usize> = truth
            .iter()
            .map(|&(a, b)| {
                let (ib, ia) = grid.nearest_cell(a, b).expect("truth inside box");
                regions.label_near(ib, ia).expect("truth next to a feasible cell")
            })
            .collect();
        assert_ne!(labels[0], labels[1]);
        assert!(grid.plateau_spread().unwrap() <= 1.0);
    }

    #[test]
    fn grid_invariants_hold_on_every_cell() {
        let (f, _) = factor_of(Scenario::TwoCompOverlap);
        let grid = afs_grid_2comp_auto(&f, 61, DEFAULT_TOL).unwrap();
        assert_eq!(grid.cells.len(), 61 * 61);
        assert_eq!(grid.factor_hash, f.fingerprint());
        for cell in &grid.cells {
            if cell.feasible {
                assert!(cell.log_ssq.is_finite());
                let s = cell.s_rows.as_ref().unwrap();
                for r in s.row_iter() {
                    assert_eq!(r.max(), 1.0);
                    assert!(r.min() >= 0.0);
                }
            } else {
                assert!(cell.s_rows.is_none());
            }
        }
    }

    #[test]
    fn swapped_factor_gives_transposed_afs() {
        let (f, _) = factor_of(Scenario::TwoCompPlain);
        let spec = default_grid_2comp(&f, 81, DEFAULT_TOL).unwrap();
        let grid = afs_grid_2comp(&f, &spec).unwrap();
        let swapped = afs_grid_2comp(&f.swapped(0, 1), &spec.transposed()).unwrap();
        let (rows, cols) = grid.shape();
        let mut diff = 0;
        for ib in 0..rows {
            for ia in 0..cols {
                diff += (grid.cell(ib, ia).feasible != swapped.cell(ia, ib).feasible) as usize;
            }
        }
        assert!(diff * 100 <= grid.feasible_count(), "{diff} of {}", grid.feasible_count());
    }

    #[test]
    fn region_count_survives_refinement() {
        let (f, _) = factor_of(Scenario::TwoCompPlain);
        let coarse = afs_grid_2comp_auto(&f, 51, DEFAULT_TOL).unwrap();
        let mut spec = coarse.spec;
        spec.a.steps = 101;
        spec.b.steps = 101;
        let fine = afs_grid_2comp(&f, &spec).unwrap();
        assert_eq!(coarse.regions().count(), fine.regions().count());
    }

    #[test]
    fn degenerate_rotation_gets_the_sentinel() {
        let (f, _) = factor_of(Scenario::TwoCompPlain);
        let c = evaluate_cell(&f, &RotationSpec::Two { t12: 2.0, t21: 0.5 }, DEFAULT_TOL);
        assert_eq!(c.log_ssq, DEGENERATE_LOG_SSQ);
        assert!(!c.feasible && c.s_rows.is_none());
        assert!(matches!(cell_objective(&f, &DMatrix::from_element(2, 2, 1.0)), Err(Error::DegenerateRotation { .. })));
    }

    #[test]
    fn empty_box_is_an_error() {
        let (f, _) = factor_of(Scenario::TwoCompPlain);
        let spec = default_grid_2comp(&f, 11, DEFAULT_TOL).unwrap();
        let w = spec.a.max - spec.a.min;
        let far = GridSpec { a: GridAxis::new(spec.a.max + w, spec.a.max + 2.0 * w, 11), ..spec };
        assert!(matches!(afs_grid_2comp(&f, &far), Err(Error::EmptyAfs)));
        let bad = GridSpec { a: GridAxis::new(1.0, 0.0, 11), ..spec };
        assert!(matches!(afs_grid_2comp(&f, &bad), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn wrong_component_count_is_rejected() {
        let (f2, _) = factor_of(Scenario::TwoCompPlain);
        let (f3, _) = factor_of(Scenario::ThreeCompPlain);
        let spec = default_grid_2comp(&f2, 11, DEFAULT_TOL).unwrap();
        assert!(afs_grid_2comp(&f3, &spec).is_err());
        assert!(afs_grid_3comp(&f2, &spec, &SimplexOptions::default()).is_err());
    }

    #[test]
    fn swap_map_is_an_involution() {
        let (a, b) = swap_components_2comp(-0.4, 2.5);
        let (a2, b2) = swap_components_2comp(a, b);
        assert!((a2 + 0.4).abs() < 1e-15 && (b2 - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cone_vertices_of_private_channel_data_are_the_true_spectra() {
        let (f, c_true) = factor_of(Scenario::ThreeCompPlain);
        let verts = spectral_cone_vertices(&f, 0.0).unwrap();
        assert_eq!(verts.len(), 3);
        for (a, b) in true_coords(&f, &c_true).unwrap() {
            let d = verts.iter().map(|v| (v[0] - a).hypot(v[1] - b)).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-8, "{d}");
        }
    }

    #[test]
    fn three_comp_feasible_cells_sit_near_the_floor() {
        let (f, c_true) = factor_of(Scenario::ThreeCompPlain);
        let grid = small_grid_3comp(&f, 31);
        assert!(grid.feasible_count() > 0);
        for c in grid.cells.iter().filter(|c| c.feasible) {
            assert!(c.log_ssq <= grid.floor_log + 0.5, "{} vs {}", c.log_ssq, grid.floor_log);
            assert!(c.inner_t.is_some());
        }
        let regions = grid.regions();
        for (a, b) in true_coords(&f, &c_true).unwrap() {
            let (ib, ia) = grid.nearest_cell(a, b).unwrap();
            assert!(regions.label_near(ib, ia).is_some(), "({a}, {b})");
        }
    }

    #[test]
    fn three_comp_grid_is_independent_of_thread_count() {
        let (f, _) = factor_of(Scenario::ThreeCompOverlap);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| small_grid_3comp(&f, 15))
        };
        let one = run(1);
        assert_eq!(one, run(3));
        assert_eq!(one, run(1));
    }

    proptest! {
        #[test]
        fn canonical_signs_keep_the_product(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let mut c = DMatrix::from_row_slice(3, 2, &vals[..6]);
            let mut s = DMatrix::from_row_slice(2, 3, &vals[6..]);
            let before = &c * &s;
            canonicalize_signs(&mut c, &mut s);
            let after = &c * &s;
            prop_assert!((before - after).abs().max() < 1e-12);
            for r in s.row_iter() {
                let lead = r.iter().fold(0.0f64, |b, &v| if v.abs() > b.abs() { v } else { b });
                prop_assert!(lead >= 0.0);
            }
        }

        #[test]
        fn feasibility_matches_its_definition(
            vals in prop::collection::vec(-0.01f64..1.0, 8),
            tol in 0.0f64..0.02,
        ) {
            let c = DMatrix::from_row_slice(2, 2, &vals[..4]);
            let s = DMatrix::from_row_slice(2, 2, &vals[4..]);
            let ok = |m: &DMatrix<f64>| m.min() >= -tol * m.max();
            prop_assert_eq!(feasibility(&c, &s, tol), ok(&c) && ok(&s));
        }
    }
}
