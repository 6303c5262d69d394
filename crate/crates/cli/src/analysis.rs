//! Quantities reported in the summaries: where the true solution sits on the
//! grid, norm minima, gradients near the truth and the `L0` plateau.
//!
//! Region `AFS-k` is the region holding the `k`-th true point: for two
//! components point one is the simulated ordering and point two its swap, for
//! three components point `k` is component `k` in the first row.

use afs_lab_core::afs::{
    afs_grid_2comp, afs_grid_2comp_auto, afs_grid_3comp_with, default_grid_3comp, true_coords, AfsGrid, GridAxis,
    GridSpec, Regions,
};
use afs_lab_core::factor::SvdFactor;
use afs_lab_core::norms::{gradient_field, interior_mask, neighborhood_mean, norm_surface, NormSurface};
use afs_lab_core::Error;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Half-width of the neighborhood averaged around the true cell (5x5).
pub const GRADIENT_RADIUS: usize = 2;

/// Scaled gradients below this count as flat.
pub const FLAT_GRADIENT: f64 = 1e-9;

pub fn afs_label(k: usize) -> String {
    let roman = ["I", "II", "III", "IV", "V", "VI"];
    format!("AFS-{}", roman.get(k).copied().unwrap_or("?"))
}

/// Lattice distance: the larger of the row and column offsets.
pub fn cell_distance(a: [usize; 2], b: [usize; 2]) -> usize {
    a[0].abs_diff(b[0]).max(a[1].abs_diff(b[1]))
}

/// Computes the grid the config asks for, with the config seed driving the
/// inner simplex.
pub fn compute_grid(factor: &SvdFactor<f64>, cfg: &ExperimentConfig) -> CliResult<AfsGrid<f64>> {
    let p = factor.p();
    let steps = cfg.grid.steps_for(p);
    let explicit = match (cfg.grid.a, cfg.grid.b) {
        (Some(a), Some(b)) => Some(GridSpec {
            a: GridAxis::new(a[0], a[1], steps),
            b: GridAxis::new(b[0], b[1], steps),
            tol: cfg.grid.tol,
        }),
        _ => None,
    };
    let grid = match p {
        2 => match explicit {
            Some(spec) => afs_grid_2comp(factor, &spec),
            None => afs_grid_2comp_auto(factor, steps, cfg.grid.tol),
        },
        3 => {
            let spec = match explicit {
                Some(spec) => spec,
                None => default_grid_3comp(factor, steps, cfg.grid.tol)?,
            };
            let mut opts = cfg.simplex.clone();
            opts.seed = cfg.seed;
            afs_grid_3comp_with(factor, &spec, &opts, &cfg.inner_search)
        }
        p => return Err(CliError::Config(format!("AFS grids need 2 or 3 components, the scenario has {p}"))),
    };
    Ok(grid?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthCell {
    pub afs: String,
    /// `(t12, t21)` or `(t12, t13)`.
    pub coords: [f64; 2],
    /// `[row, col]` of the nearest lattice point; absent outside the box.
    pub cell: Option<[usize; 2]>,
    pub cell_feasible: bool,
    /// Region of the cell or of a feasible cell next to it.
    pub region: Option<usize>,
}

pub fn locate_truth(
    grid: &AfsGrid<f64>,
    regions: &Regions,
    factor: &SvdFactor<f64>,
    c_true: &DMatrix<f64>,
) -> CliResult<Vec<TruthCell>> {
    let coords = true_coords(factor, c_true)?;
    Ok(coords
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let cell = grid.nearest_cell(a, b);
            TruthCell {
                afs: afs_label(k),
                coords: [a, b],
                cell: cell.map(|(r, c)| [r, c]),
                cell_feasible: cell.is_some_and(|(r, c)| grid.cell(r, c).feasible),
                region: cell.and_then(|(r, c)| regions.label_near(r, c)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArgminReport {
    pub x: f64,
    pub cell: [usize; 2],
    pub value: f64,
    /// Lattice distance to the true cell (nearest true cell for global minima).
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    pub gradient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthNorms {
    pub afs: String,
    pub region: usize,
    pub cell: [usize; 2],
    pub argmin_l1: ArgminReport,
    pub argmin_l2: ArgminReport,
    pub l1_l2_argmin_differ: bool,
    /// Mean min-max-scaled gradient magnitude (scaling over the region) in
    /// the 5x5 neighborhood of the true cell.
    pub gradient_l1: Option<f64>,
    pub gradient_l2: Option<f64>,
    pub gradient_ratio: Option<f64>,
    pub sweep: Vec<SweepPoint>,
}

fn argmin_in(surface: &NormSurface, target: [usize; 2]) -> Option<ArgminReport> {
    let (r, c) = surface.argmin()?;
    Some(ArgminReport { x: surface.x_exponent, cell: [r, c], value: surface.get(r, c)?, distance: cell_distance([r, c], target) })
}

/// Near-truth gradient of a region-restricted surface; `None` when the region
/// is too small for differences.
pub fn near_gradient(surface: &NormSurface, regions: &Regions, region: usize, cell: [usize; 2]) -> CliResult<Option<f64>> {
    let local = surface.region(regions, region);
    match gradient_field(&local, true) {
        Ok(g) => Ok(neighborhood_mean(&g, local.rows, local.cols, (cell[0], cell[1]), GRADIENT_RADIUS)),
        Err(Error::RegionTooSmall(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Minima, gradient comparison and sweep around each located true cell.
pub fn truth_norms(
    grid: &AfsGrid<f64>,
    regions: &Regions,
    truths: &[TruthCell],
    sweep_xs: &[f64],
    zero_tol: f64,
) -> CliResult<Vec<TruthNorms>> {
    let l1 = norm_surface(grid, 1.0, zero_tol)?;
    let l2 = norm_surface(grid, 2.0, zero_tol)?;
    let sweep = sweep_xs.iter().map(|&x| norm_surface(grid, x, zero_tol)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for t in truths {
        let (Some(cell), Some(region)) = (t.cell, t.region) else { continue };
        let (r1, r2) = (l1.region(regions, region), l2.region(regions, region));
        let (Some(argmin_l1), Some(argmin_l2)) = (argmin_in(&r1, cell), argmin_in(&r2, cell)) else { continue };
        let gradient_l1 = near_gradient(&l1, regions, region, cell)?;
        let gradient_l2 = near_gradient(&l2, regions, region, cell)?;
        let gradient_ratio = match (gradient_l1, gradient_l2) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        let sweep = sweep
            .iter()
            .map(|s| Ok(SweepPoint { x: s.x_exponent, gradient: near_gradient(s, regions, region, cell)? }))
            .collect::<CliResult<Vec<_>>>()?;
        out.push(TruthNorms {
            afs: t.afs.clone(),
            region,
            cell,
            l1_l2_argmin_differ: argmin_l1.cell != argmin_l2.cell,
            argmin_l1,
            argmin_l2,
            gradient_l1,
            gradient_l2,
            gradient_ratio,
            sweep,
        });
    }
    Ok(out)
}

/// Minimum over all feasible cells, with the distance to the nearest true cell.
pub fn global_argmin(surface: &NormSurface, truths: &[TruthCell]) -> Option<ArgminReport> {
    let (r, c) = surface.argmin()?;
    let distance = truths.iter().filter_map(|t| t.cell).map(|t| cell_distance([r, c], t)).min().unwrap_or(usize::MAX);
    Some(ArgminReport { x: surface.x_exponent, cell: [r, c], value: surface.get(r, c)?, distance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauStats {
    pub x: f64,
    /// Feasible cells whose four neighbors are feasible.
    pub interior_cells: usize,
    /// Interior cells with scaled gradient below [`FLAT_GRADIENT`].
    pub flat_cells: usize,
    pub flat_fraction: f64,
}

/// Flatness of the summed `L0` surface over interior feasible cells.
pub fn l0_plateau(grid: &AfsGrid<f64>, zero_tol: f64) -> CliResult<Option<PlateauStats>> {
    let surface = norm_surface(grid, 0.0, zero_tol)?;
    let grads = match gradient_field(&surface, true) {
        Ok(g) => g,
        Err(Error::RegionTooSmall(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let interior = interior_mask(&surface);
    let mut n = 0;
    let mut flat = 0;
    for (g, inside) in grads.iter().zip(&interior) {
        if *inside {
            n += 1;
            if g.is_some_and(|g| g < FLAT_GRADIENT) {
                flat += 1;
            }
        }
    }
    let flat_fraction = if n > 0 { flat as f64 / n as f64 } else { 0.0 };
    Ok(Some(PlateauStats { x: 0.0, interior_cells: n, flat_cells: flat, flat_fraction }))
}
