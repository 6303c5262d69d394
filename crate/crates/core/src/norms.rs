//! `L_x` power sums of the spectra stored on an AFS grid, their surfaces,
//! gradients and exponent sweeps.

use crate::afs::{AfsGrid, Regions};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_ZERO_TOL: f64 = 1e-6;

pub(crate) fn check_exponent(x: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&x) {
        return Err(Error::InvalidParameter(format!("norm exponent must lie in [0, 2], got {x}")));
    }
    Ok(())
}

pub(crate) fn lx_norm_row<T: Real>(v: impl Iterator<Item = T>, x: f64, zero_tol: f64) -> f64 {
    if x == 0.0 {
        v.filter(|e| e.to_f64_lossy().abs() > zero_tol).count() as f64
    } else {
        v.map(|e| e.to_f64_lossy().abs().powf(x)).sum()
    }
}

/// `sum |v_i|^x` for `x > 0` (no root taken); the number of entries above
/// `zero_tol` in magnitude for `x = 0`.
pub fn lx_norm<T: Real>(v: &[T], x: f64, zero_tol: f64) -> Result<f64> {
    check_exponent(x)?;
    Ok(lx_norm_row(v.iter().copied(), x, zero_tol))
}

/// `L_x` values over a grid. Cells without stored spectra (infeasible) are
/// `None` in every array.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSurface {
    pub x_exponent: f64,
    pub rows: usize,
    pub cols: usize,
    /// Grid coordinates of the columns (`t12`) and rows.
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// Row-major values for each component.
    pub per_component: Vec<Vec<Option<f64>>>,
    /// Sum over components.
    pub sum: Vec<Option<f64>>,
    /// `sum` min-max scaled to `[0, 1]` over the present cells.
    pub scaled: Vec<Option<f64>>,
}

fn min_max_scale(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let present = values.iter().flatten();
    let lo = present.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = present.cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| v.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }))
        .collect()
}

impl NormSurface {
    pub fn present_count(&self) -> usize {
        self.sum.iter().flatten().count()
    }

    pub fn get(&self, ib: usize, ia: usize) -> Option<f64> {
        self.sum[ib * self.cols + ia]
    }

    /// Keeps only the cells where `keep` is true and rescales over them.
    pub fn restricted(&self, keep: &[bool]) -> NormSurface {
        let mask = |v: &Vec<Option<f64>>| -> Vec<Option<f64>> {
            v.iter().zip(keep).map(|(x, &k)| if k { *x } else { None }).collect()
        };
        let sum = mask(&self.sum);
        NormSurface {
            x_exponent: self.x_exponent,
            rows: self.rows,
            cols: self.cols,
            a_values: self.a_values.clone(),
            b_values: self.b_values.clone(),
            per_component: self.per_component.iter().map(mask).collect(),
            scaled: min_max_scale(&sum),
            sum,
        }
    }

    /// [`restricted`](Self::restricted) to one connected region.
    pub fn region(&self, regions: &Regions, id: usize) -> NormSurface {
        let keep: Vec<bool> = regions.labels.iter().map(|l| *l == Some(id)).collect();
        self.restricted(&keep)
    }

    /// Present cell with the smallest sum (first in row-major order on ties).
    pub fn argmin(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.sum.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| (i / self.cols, i % self.cols))
    }
}

fn surface_from<T: Real>(grid: &AfsGrid<T>, x: f64, zero_tol: f64) -> Result<NormSurface> {
    check_exponent(x)?;
    let (rows, cols) = grid.shape();
    let mut per_component = vec![vec![None; rows * cols]; grid.p];
    let mut sum = vec![None; rows * cols];
    let mut any = false;
    for (i, cell) in grid.cells.iter().enumerate() {
        let Some(s) = &cell.s_rows else { continue };
        let vals: Vec<f64> = match cell.cached_lx(x) {
            Some(v) => v.to_vec(),
            None => s.row_iter().map(|r| lx_norm_row(r.iter().copied(), x, zero_tol)).collect(),
        };
        for (k, v) in vals.iter().enumerate() {
            per_component[k][i] = Some(*v);
        }
        sum[i] = Some(vals.iter().sum());
        any = true;
    }
    if !any {
        return Err(Error::EmptyAfs);
    }
    Ok(NormSurface {
        x_exponent: x,
        rows,
        cols,
        a_values: (0..cols).map(|i| grid.spec.a.value(i)).collect(),
        b_values: (0..rows).map(|i| grid.spec.b.value(i)).collect(),
        per_component,
        scaled: min_max_scale(&sum),
        sum,
    })
}

/// Per-component and summed `L_x` of the stored spectra of every feasible cell.
pub fn norm_surface<T: Real>(grid: &AfsGrid<T>, x: f64, zero_tol: f64) -> Result<NormSurface> {
    surface_from(grid, x, zero_tol)
}

/// Gradient magnitude of the summed (or scaled) surface in grid-coordinate
/// units: central differences where both neighbors are present, one-sided
/// where only one is, zero along an axis with neither.
pub fn gradient_field(surface: &NormSurface, scaled: bool) -> Result<Vec<Option<f64>>> {
    let present = surface.present_count();
    if present < 9 {
        return Err(Error::RegionTooSmall(present));
    }
    let vals = if scaled { &surface.scaled } else { &surface.sum };
    let (rows, cols) = (surface.rows, surface.cols);
    let ha = if cols > 1 { surface.a_values[1] - surface.a_values[0] } else { 1.0 };
    let hb = if rows > 1 { surface.b_values[1] - surface.b_values[0] } else { 1.0 };
    let at = |r: usize, c: usize| vals[r * cols + c];
    let diff = |lo: Option<f64>, mid: f64, hi: Option<f64>, h: f64| match (lo, hi) {
        (Some(l), Some(u)) => (u - l) / (2.0 * h),
        (None, Some(u)) => (u - mid) / h,
        (Some(l), None) => (mid - l) / h,
        (None, None) => 0.0,
    };
    let mut out = vec![None; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let Some(mid) = at(r, c) else { continue };
            let left = if c > 0 { at(r, c - 1) } else { None };
            let right = if c + 1 < cols { at(r, c + 1) } else { None };
            let down = if r > 0 { at(r - 1, c) } else { None };
            let up = if r + 1 < rows { at(r + 1, c) } else { None };
            let ga = diff(left, mid, right, ha);
            let gb = diff(down, mid, up, hb);
            out[r * cols + c] = Some(ga.hypot(gb));
        }
    }
    Ok(out)
}

/// Cells whose four lattice neighbors are all present.
pub fn interior_mask(surface: &NormSurface) -> Vec<bool> {
    let (rows, cols) = (surface.rows, surface.cols);
    let at = |r: usize, c: usize| surface.sum[r * cols + c].is_some();
    (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            at(r, c) && r > 0 && c > 0 && r + 1 < rows && c + 1 < cols
                && at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)
        })
        .collect()
}

/// Mean of the present values in the `(2 radius + 1)^2` window around `center`.
pub fn neighborhood_mean(values: &[Option<f64>], rows: usize, cols: usize, center: (usize, usize), radius: usize) -> Option<f64> {
    let (cr, cc) = center;
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in cr.saturating_sub(radius)..=(cr + radius).min(rows - 1) {
        for c in cc.saturating_sub(radius)..=(cc + radius).min(cols - 1) {
            if let Some(v) = values[r * cols + c] {
                acc += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// One min-max scaled surface per exponent; `xs` must be monotone and in `[0, 2]`.
pub fn sweep_x<T: Real>(grid: &AfsGrid<T>, xs: &[f64], zero_tol: f64) -> Result<Vec<NormSurface>> {
    let ascending = xs.windows(2).all(|w| w[0] <= w[1]);
    let descending = xs.windows(2).all(|w| w[0] >= w[1]);
    if !(ascending || descending) {
        return Err(Error::InvalidParameter("x_list must be sorted".into()));
    }
    xs.iter().map(|&x| norm_surface(grid, x, zero_tol)).collect()
}
