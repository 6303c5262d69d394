//! Experiment configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use afs_lab_core::afs::{inner_simplex_defaults, InnerSearch, DEFAULT_TOL};
use afs_lab_core::mcr::McrOptions;
use afs_lab_core::norms::DEFAULT_ZERO_TOL;
use afs_lab_core::simkit::{Scenario, ScenarioConfig};
use afs_lab_core::solvers::{PenaltySpec, SimplexOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A canned scenario by tag, or `{"custom": "path/to/scenario.json"}`
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioRef {
    TwoCompPlain,
    TwoCompOverlap,
    ThreeCompPlain,
    ThreeCompOverlap,
    Custom(PathBuf),
}

impl ScenarioRef {
    pub fn canned(&self) -> Option<Scenario> {
        match self {
            ScenarioRef::TwoCompPlain => Some(Scenario::TwoCompPlain),
            ScenarioRef::TwoCompOverlap => Some(Scenario::TwoCompOverlap),
            ScenarioRef::ThreeCompPlain => Some(Scenario::ThreeCompPlain),
            ScenarioRef::ThreeCompOverlap => Some(Scenario::ThreeCompOverlap),
            ScenarioRef::Custom(_) => None,
        }
    }
}

impl From<Scenario> for ScenarioRef {
    fn from(s: Scenario) -> Self {
        match s {
            Scenario::TwoCompPlain => ScenarioRef::TwoCompPlain,
            Scenario::TwoCompOverlap => ScenarioRef::TwoCompOverlap,
            Scenario::ThreeCompPlain => ScenarioRef::ThreeCompPlain,
            Scenario::ThreeCompOverlap => ScenarioRef::ThreeCompOverlap,
        }
    }
}

/// Grid lattice. Without explicit bounds the box is derived from the data
/// (auto-widened for two components, the spectral cone for three).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Steps per axis; 201 for two components and 81 for three when unset.
    pub steps: Option<usize>,
    pub a: Option<[f64; 2]>,
    pub b: Option<[f64; 2]>,
    pub tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: None, a: None, b: None, tol: DEFAULT_TOL }
    }
}

impl GridConfig {
    pub fn steps_for(&self, p: usize) -> usize {
        self.steps.unwrap_or(if p == 2 { 201 } else { 81 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    PurestRows,
    RandomRows,
    /// Start from the simulated spectra.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioRef,
    /// Drives the noise, random initial estimates and simplex restarts.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "inner_simplex_defaults")]
    pub simplex: SimplexOptions,
    #[serde(default)]
    pub inner_search: InnerSearch,
    #[serde(default = "default_penalties")]
    pub penalties: Vec<PenaltySpec>,
    /// Multiply each `lambda` by `max|C^T D|` of the unpenalized fit.
    #[serde(default = "yes")]
    pub relative_lambda: bool,
    #[serde(default = "default_x_list")]
    pub x_list: Vec<f64>,
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
    #[serde(default)]
    pub mcr: McrOptions,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub heatmaps: bool,
}

fn yes() -> bool {
    true
}

fn default_penalties() -> Vec<PenaltySpec> {
    [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2].into_iter().map(PenaltySpec::lasso).collect()
}

fn default_x_list() -> Vec<f64> {
    (0..=8).map(|i| 2.0 - 0.25 * i as f64).collect()
}

fn default_zero_tol() -> f64 {
    DEFAULT_ZERO_TOL
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("afs-lab-out")
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        serde_json::from_value(serde_json::json!({ "scenario": scenario.tag() })).expect("defaults deserialize")
    }
}

/// A validated config together with the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Experiment {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let exp = Self { config, base_dir };
        exp.validate()?;
        Ok(exp)
    }

    pub fn from_config(config: ExperimentConfig, base_dir: PathBuf) -> CliResult<Self> {
        let exp = Self { config, base_dir };
        exp.validate()?;
        Ok(exp)
    }

    pub fn scenario_config(&self) -> CliResult<ScenarioConfig> {
        match &self.config.scenario {
            ScenarioRef::Custom(rel) => {
                let path = self.base_dir.join(rel);
                let text = fs::read_to_string(&path)
                    .map_err(|e| bad(format!("scenario.custom: cannot read {}: {e}", path.display())))?;
                let sc: ScenarioConfig = serde_json::from_str(&text)
                    .map_err(|e| bad(format!("scenario.custom {}: {e}", path.display())))?;
                sc.validate().map_err(|e| bad(format!("scenario.custom {}: {e}", path.display())))?;
                Ok(sc)
            }
            canned => Ok(canned.canned().expect("canned scenario").config()),
        }
    }

    fn validate(&self) -> CliResult<()> {
        let c = &self.config;
        if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
            return Err(bad(format!("noise_sigma must be finite and >= 0, got {}", c.noise_sigma)));
        }
        let g = &c.grid;
        if let Some(s) = g.steps {
            if s < 2 {
                return Err(bad(format!("grid.steps must be >= 2, got {s}")));
            }
        }
        match (g.a, g.b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                for (name, ax) in [("grid.a", a), ("grid.b", b)] {
                    if !(ax[0].is_finite() && ax[1].is_finite() && ax[0] < ax[1]) {
                        return Err(bad(format!("{name} must be [min, max] with min < max, got {ax:?}")));
                    }
                }
            }
            _ => return Err(bad("grid.a and grid.b must be given together")),
        }
        if !(g.tol >= 0.0 && g.tol.is_finite()) {
            return Err(bad(format!("grid.tol must be finite and >= 0, got {}", g.tol)));
        }
        c.simplex.validate().map_err(|e| bad(format!("simplex: {e}")))?;
        let s = &c.inner_search;
        if !(0.0..1.0).contains(&s.vertex_pull) {
            return Err(bad(format!("inner_search.vertex_pull must lie in [0, 1), got {}", s.vertex_pull)));
        }
        if !(s.outside_budget > 0.0 && s.outside_budget <= 1.0) {
            return Err(bad(format!("inner_search.outside_budget must lie in (0, 1], got {}", s.outside_budget)));
        }
        for (i, p) in c.penalties.iter().enumerate() {
            p.validate().map_err(|e| bad(format!("penalties[{i}]: {e}")))?;
        }
        if c.x_list.is_empty() {
            return Err(bad("x_list must not be empty"));
        }
        if let Some(x) = c.x_list.iter().find(|x| !(0.0..=2.0).contains(*x)) {
            return Err(bad(format!("x_list entries must lie in [0, 2], got {x}")));
        }
        let up = c.x_list.windows(2).all(|w| w[0] < w[1]);
        let down = c.x_list.windows(2).all(|w| w[0] > w[1]);
        if !(up || down) {
            return Err(bad("x_list must be strictly increasing or strictly decreasing"));
        }
        if !(c.zero_tol >= 0.0 && c.zero_tol.is_finite()) {
            return Err(bad(format!("zero_tol must be finite and >= 0, got {}", c.zero_tol)));
        }
        if !(c.mcr.epsilon > 0.0 && c.mcr.epsilon.is_finite()) || c.mcr.max_iter == 0 {
            return Err(bad("mcr.epsilon must be positive and mcr.max_iter at least 1"));
        }
        self.scenario_config()?;
        Ok(())
    }
}
