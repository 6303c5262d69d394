//! The `simulate`, `afs`, `norms` and `mcr` commands.

use std::path::{Path, PathBuf};

use afs_lab_core::afs::{max_log_ssq, swap_mismatch_2comp, AfsGrid, GridSpec, InnerSearch, Regions};
use afs_lab_core::factor::{ssq, truncated_svd, SvdFactor};
use afs_lab_core::mcr::{initial_estimate, lambda_scale, match_spectra, mcr_als, InitMethod, McrOptions};
use afs_lab_core::norms::{gradient_field, sweep_x};
use afs_lab_core::simkit::Dataset;
use afs_lab_core::solvers::{PenaltySpec, SimplexOptions};
use serde::Serialize;

use crate::analysis::{self, ArgminReport, PlateauStats, TruthCell, TruthNorms};
use crate::config::{Experiment, InitConfig};
use crate::error::CliResult;
use crate::io::{fmt_num, fmt_opt, pgm, write_file, write_json, write_matrix, Table};

/// Exponents cached on every feasible cell and written to `afs.csv`.
const AFS_CSV_EXPONENTS: [f64; 3] = [0.0, 1.0, 2.0];

/// One experiment: the dataset is built up front, the grid on first use.
pub struct Session {
    pub exp: Experiment,
    pub out: PathBuf,
    pub dataset: Dataset<f64>,
    factor: Option<SvdFactor<f64>>,
    grid: Option<(AfsGrid<f64>, Regions)>,
}

impl Session {
    pub fn new(exp: Experiment, out: PathBuf) -> CliResult<Self> {
        let sc = exp.scenario_config()?;
        let dataset = sc.build::<f64>(exp.config.noise_sigma, exp.config.seed)?;
        Ok(Self { exp, out, dataset, factor: None, grid: None })
    }

    pub fn factor(&mut self) -> CliResult<&SvdFactor<f64>> {
        if self.factor.is_none() {
            self.factor = Some(truncated_svd(&self.dataset.d, self.dataset.n_components())?);
        }
        Ok(self.factor.as_ref().expect("just set"))
    }

    pub fn grid(&mut self) -> CliResult<&(AfsGrid<f64>, Regions)> {
        if self.grid.is_none() {
            let cfg = self.exp.config.clone();
            let factor = self.factor()?;
            let mut grid = analysis::compute_grid(factor, &cfg)?;
            grid.cache_norms(&AFS_CSV_EXPONENTS, cfg.zero_tol)?;
            let regions = grid.regions();
            self.grid = Some((grid, regions));
        }
        Ok(self.grid.as_ref().expect("just set"))
    }

    fn truths(&mut self) -> CliResult<Vec<TruthCell>> {
        self.grid()?;
        let (grid, regions) = self.grid.as_ref().expect("computed");
        analysis::locate_truth(grid, regions, self.factor.as_ref().expect("computed"), &self.dataset.c_true)
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    scenario: &'a str,
    seed: u64,
    noise_sigma: f64,
    n_scans: usize,
    n_channels: usize,
    n_components: usize,
    /// Channels where more than one true spectrum is non-zero, with the components.
    shared_channels: Vec<(usize, Vec<usize>)>,
}

pub fn simulate(s: &mut Session) -> CliResult<()> {
    let ds = &s.dataset;
    write_matrix(&s.path("D.csv"), &ds.d)?;
    write_matrix(&s.path("C_true.csv"), &ds.c_true)?;
    write_matrix(&s.path("S_true.csv"), &ds.s_true)?;
    let shared_channels = (0..ds.n_channels())
        .filter_map(|j| {
            let comps: Vec<usize> = (0..ds.n_components()).filter(|&k| ds.s_true[(k, j)] > 0.0).collect();
            (comps.len() > 1).then_some((j, comps))
        })
        .collect();
    let meta = SimulateMeta {
        scenario: &ds.scenario,
        seed: ds.seed,
        noise_sigma: ds.noise_sigma,
        n_scans: ds.n_scans(),
        n_channels: ds.n_channels(),
        n_components: ds.n_components(),
        shared_channels,
    };
    write_json(&s.path("meta.json"), &meta)
}

#[derive(Serialize)]
struct SwapReport {
    mismatched: usize,
    total: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct AfsMeta {
    scenario: String,
    p: usize,
    seed: u64,
    grid: GridSpec,
    factor_hash: String,
    floor_log: f64,
    max_log_ssq: f64,
    feasible_count: usize,
    region_count: usize,
    region_sizes: Vec<usize>,
    plateau_spread: Option<f64>,
    truths: Vec<TruthCell>,
    swap_mismatch: Option<SwapReport>,
    simplex: Option<SimplexOptions>,
    inner_search: Option<InnerSearch>,
}

pub fn afs(s: &mut Session) -> CliResult<()> {
    let truths = s.truths()?;
    let (grid, regions) = s.grid.as_ref().expect("computed");
    let p = grid.p;

    let mut header = vec!["row", "col", "t_a", "t_b", "log_ssq", "feasible", "region"];
    if p == 3 {
        header.extend(["t22", "t23", "t32", "t33"]);
    }
    header.extend(["sum_l0", "sum_l1", "sum_l2"]);
    let mut table = Table::new(&header);
    let (rows, cols) = grid.shape();
    for r in 0..rows {
        for c in 0..cols {
            let cell = grid.cell(r, c);
            let mut f = vec![
                r.to_string(),
                c.to_string(),
                fmt_num(cell.a),
                fmt_num(cell.b),
                fmt_num(cell.log_ssq),
                (cell.feasible as u8).to_string(),
                regions.label(r, c).map(|l| l.to_string()).unwrap_or_default(),
            ];
            if p == 3 {
                match cell.inner_t {
                    Some(t) => f.extend(t.iter().map(|&v| fmt_num(v))),
                    None => f.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
            for x in AFS_CSV_EXPONENTS {
                f.push(fmt_opt(cell.cached_lx(x).map(|v| v.iter().sum())));
            }
            table.row(&f);
        }
    }
    write_file(&s.path("afs.csv"), &table.finish())?;

    if s.exp.config.heatmaps {
        let values: Vec<Option<f64>> = grid.cells.iter().map(|c| Some(c.log_ssq).filter(|v| *v < 90.0)).collect();
        write_file(&s.path("heatmap.pgm"), &pgm(rows, cols, &values))?;
    }

    let swap_mismatch = (p == 2 && regions.count() == 2).then(|| {
        let (mismatched, total) = swap_mismatch_2comp(grid, regions, 0, 1);
        SwapReport { mismatched, total, fraction: mismatched as f64 / total as f64 }
    });
    let meta = AfsMeta {
        scenario: s.dataset.scenario.clone(),
        p,
        seed: s.exp.config.seed,
        grid: grid.spec,
        factor_hash: grid.factor_hash.clone(),
        floor_log: grid.floor_log,
        max_log_ssq: max_log_ssq(grid),
        feasible_count: grid.feasible_count(),
        region_count: regions.count(),
        region_sizes: regions.sizes.clone(),
        plateau_spread: grid.plateau_spread(),
        truths,
        swap_mismatch,
        simplex: grid.simplex.clone(),
        inner_search: (p == 3).then_some(s.exp.config.inner_search),
    };
    write_json(&s.path("afs_meta.json"), &meta)
}

#[derive(Serialize)]
struct FrameInfo {
    index: usize,
    x: f64,
    csv: String,
    pgm: Option<String>,
}

#[derive(Serialize)]
struct NormsSummary {
    scenario: String,
    p: usize,
    zero_tol: f64,
    x_list: Vec<f64>,
    region_count: usize,
    region_sizes: Vec<usize>,
    gradient_radius: usize,
    truths: Vec<TruthNorms>,
    /// Minima over all feasible cells, one per entry of `x_list`.
    global_argmin: Vec<ArgminReport>,
    l0_plateau: Option<PlateauStats>,
    frames: Vec<FrameInfo>,
}

/// File-name form of an exponent: `2`, `0.25`.
fn x_name(x: f64) -> String {
    format!("{x}")
}

pub fn norms(s: &mut Session) -> CliResult<()> {
    let truths = s.truths()?;
    let cfg = s.exp.config.clone();
    let (grid, regions) = s.grid.as_ref().expect("computed");
    let (rows, cols) = grid.shape();
    let frames = sweep_x(grid, &cfg.x_list, cfg.zero_tol)?;

    let mut header = vec!["row".to_string(), "col".into(), "t_a".into(), "t_b".into(), "region".into()];
    header.extend((1..=grid.p).map(|k| format!("l_comp{k}")));
    header.extend(["sum".into(), "scaled".into()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for surface in &frames {
        let mut table = Table::new(&header);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let mut f = vec![
                    r.to_string(),
                    c.to_string(),
                    fmt_num(surface.a_values[c]),
                    fmt_num(surface.b_values[r]),
                    regions.label(r, c).map(|l| l.to_string()).unwrap_or_default(),
                ];
                f.extend(surface.per_component.iter().map(|v| fmt_opt(v[i])));
                f.push(fmt_opt(surface.sum[i]));
                f.push(fmt_opt(surface.scaled[i]));
                table.row(&f);
            }
        }
        write_file(&s.path(format!("norms_x{}.csv", x_name(surface.x_exponent))), &table.finish())?;
    }

    let mut frame_info = Vec::new();
    for (idx, surface) in frames.iter().enumerate() {
        let grads = gradient_field(surface, true).ok();
        let mut table = Table::new(&["row", "col", "t_a", "t_b", "x", "scaled", "scaled_gradient"]);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                table.row(&[
                    r.to_string(),
                    c.to_string(),
                    fmt_num(surface.a_values[c]),
                    fmt_num(surface.b_values[r]),
                    fmt_num(surface.x_exponent),
                    fmt_opt(surface.scaled[i]),
                    fmt_opt(grads.as_ref().and_then(|g| g[i])),
                ]);
            }
        }
        let csv = format!("frames/frame_{idx:03}.csv");
        write_file(&s.path(&csv), &table.finish())?;
        let pgm_name = cfg.heatmaps.then(|| format!("frames/frame_{idx:03}.pgm"));
        if let Some(name) = &pgm_name {
            write_file(&s.path(name), &pgm(rows, cols, &surface.scaled))?;
        }
        frame_info.push(FrameInfo { index: idx, x: surface.x_exponent, csv, pgm: pgm_name });
    }

    let summary = NormsSummary {
        scenario: s.dataset.scenario.clone(),
        p: grid.p,
        zero_tol: cfg.zero_tol,
        x_list: cfg.x_list.clone(),
        region_count: regions.count(),
        region_sizes: regions.sizes.clone(),
        gradient_radius: analysis::GRADIENT_RADIUS,
        truths: analysis::truth_norms(grid, regions, &truths, &cfg.x_list, cfg.zero_tol)?,
        global_argmin: frames.iter().filter_map(|f| analysis::global_argmin(f, &truths)).collect(),
        l0_plateau: analysis::l0_plateau(grid, cfg.zero_tol)?,
        frames: frame_info,
    };
    write_json(&s.path("summary.json"), &summary)
}

#[derive(Serialize)]
struct McrRun {
    index: usize,
    /// Penalty as configured.
    requested: PenaltySpec,
    /// Penalty actually applied (after relative scaling).
    penalty: PenaltySpec,
    init: InitConfig,
    seed: u64,
    options: McrOptions,
    converged: bool,
    iterations: usize,
    final_ssq: f64,
    sum_l1: f64,
    /// Best-permutation cosine similarity of each true spectrum.
    cosine: Vec<f64>,
    mean_cosine: f64,
}

#[derive(Serialize)]
struct McrSummary {
    scenario: String,
    lambda_scale: Option<f64>,
    runs: Vec<McrRun>,
}

pub fn mcr(s: &mut Session) -> CliResult<()> {
    let cfg = &s.exp.config;
    let ds = &s.dataset;
    let p = ds.n_components();
    let method = match cfg.init {
        InitConfig::PurestRows => InitMethod::PurestRows,
        InitConfig::RandomRows => InitMethod::RandomRows,
        InitConfig::Truth => InitMethod::Provided(ds.s_true.clone()),
    };
    let s0 = initial_estimate(&ds.d, p, &method, cfg.seed)?;
    let scale = if cfg.relative_lambda && cfg.penalties.iter().any(|p| !p.is_unpenalized()) {
        let plain = mcr_als(&ds.d, &s0, &PenaltySpec::none(), &cfg.mcr)?;
        Some(lambda_scale(&ds.d, &plain.c))
    } else {
        None
    };

    let mut runs = Vec::new();
    for (index, requested) in cfg.penalties.iter().enumerate() {
        let mut penalty = *requested;
        if let Some(scale) = scale {
            penalty.lambda *= scale;
        }
        let r = mcr_als(&ds.d, &s0, &penalty, &cfg.mcr)?;
        let dir = PathBuf::from(format!("mcr/penalty_{index:02}"));
        write_matrix(&s.path(dir.join("C.csv")), &r.c)?;
        write_matrix(&s.path(dir.join("S.csv")), &r.s)?;
        let mut trace = Table::new(&["iteration", "ssq"]);
        for (i, v) in r.ssq_trace.iter().enumerate() {
            trace.row(&[i.to_string(), fmt_num(*v)]);
        }
        write_file(&s.path(dir.join("trace.csv")), &trace.finish())?;
        let cosine = match_spectra(&r.s, &ds.s_true)?;
        let run = McrRun {
            index,
            requested: *requested,
            penalty,
            init: cfg.init,
            seed: cfg.seed,
            options: cfg.mcr,
            converged: r.converged,
            iterations: r.iterations,
            final_ssq: ssq(&ds.d, &(&r.c * &r.s))?,
            sum_l1: r.spectra_l1(),
            mean_cosine: cosine.iter().sum::<f64>() / cosine.len() as f64,
            cosine,
        };
        write_json(&s.path(dir.join("result.json")), &run)?;
        runs.push(run);
    }
    write_json(&s.path("mcr/summary.json"), &McrSummary { scenario: ds.scenario.clone(), lambda_scale: scale, runs })
}
