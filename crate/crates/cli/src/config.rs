//! Run configuration: one JSON document shared by every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nbellman::registry::{self, GridSpec};
use nbellman::solver::{Mode, SolverConfig};
use nbellman::verify::SuiteConfig;
use nbellman::{ControlledProblem, LatticeGrid, ProblemDoc};
use serde::Deserialize;

use crate::error::{io_error, CliError};

pub const DEFAULT_R_GRID: &[f64] = &[0.0, 1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySource {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: Option<f64>,
    pub tau: Option<f64>,
    /// Half-width of the index box in space units.
    pub radius: Option<f64>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Control,
    StopVi,
    StopControl,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceConfig {
    Analytic,
    FineGrid { h: f64, tau: f64 },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Explicit `[tau, h]` rungs, coarse to fine.
    pub ladder: Option<Vec<(f64, f64)>>,
    /// Spacings of a coupled ladder with `τ = h²`; used when `ladder` is absent.
    pub hs: Option<Vec<f64>>,
    pub reference: Option<ReferenceConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingCheckConfig {
    #[serde(default = "default_r_levels")]
    pub r_levels: Vec<f64>,
    /// Defaults to `T / 32`.
    pub dt: Option<f64>,
}

fn default_r_levels() -> Vec<f64> {
    vec![0.0, 1.0, 10.0, 100.0, 1000.0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub paths: usize,
    pub dt: f64,
    #[serde(default)]
    pub s: f64,
    /// Start point; defaults to the grid origin `x0`.
    pub x: Option<Vec<f64>>,
    /// Constant-control policies by label; defaults to every control.
    pub policies: Option<Vec<String>>,
    /// Also evaluate the grid solver's feedback policy.
    #[serde(default)]
    pub feedback: bool,
    pub stopping_check: Option<StoppingCheckConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteRun {
    /// Registry entries; defaults to all of them.
    pub problems: Option<Vec<String>>,
    #[serde(default)]
    pub config: Option<SuiteConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub per_axis: usize,
    pub times: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { per_axis: 9, times: 3 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<ProblemDoc>,
    pub problem_file: Option<PathBuf>,
    pub registry: Option<RegistrySource>,
    #[serde(default)]
    pub grid: GridConfig,
    pub solver: Option<SolverConfig>,
    pub mode: Option<ModeName>,
    /// Intensities for `stop-control`.
    pub r_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub validation: ValidationConfig,
    pub converge: Option<ConvergeConfig>,
    pub mc: Option<McConfig>,
    pub suite: Option<SuiteRun>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads a config file. Relative `problem_file` and `out` paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.problem_file, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// A compiled problem with the grid defaults that go with it.
pub struct Resolved {
    pub name: String,
    pub problem: ControlledProblem,
    pub grid: GridSpec,
    pub x0: Vec<f64>,
    pub analytic: Option<registry::Analytic>,
    pub stopping: bool,
}

impl Resolved {
    pub fn build_grid(&self) -> Result<LatticeGrid, CliError> {
        Ok(self.grid.build(&self.problem, Some(&self.x0))?)
    }
}

fn grid_value(v: Option<f64>, fallback: Option<f64>, name: &str) -> Result<f64, CliError> {
    v.or(fallback)
        .ok_or_else(|| CliError::config(format!("grid.{name} is required for a problem that is not from the registry")))
}

pub fn resolve_problem(cfg: &RunConfig) -> Result<Resolved, CliError> {
    let sources = [cfg.problem.is_some(), cfg.problem_file.is_some(), cfg.registry.is_some()];
    match sources.iter().filter(|s| **s).count() {
        1 => {}
        0 => return Err(CliError::config("no problem given; set one of problem, problem_file, registry")),
        _ => return Err(CliError::config("give exactly one of problem, problem_file, registry")),
    }
    let (name, problem, defaults, analytic, stopping) = if let Some(src) = &cfg.registry {
        let rp = registry::registry_problem(&src.name, &src.params)?;
        (rp.name, rp.problem, Some(rp.grid), rp.analytic, rp.stopping)
    } else {
        let doc = match (&cfg.problem, &cfg.problem_file) {
            (Some(doc), _) => doc.clone(),
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                ProblemDoc::from_json(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            _ => unreachable!(),
        };
        ("custom".to_string(), doc.compile()?, None, None, false)
    };
    let g = &cfg.grid;
    let grid = GridSpec {
        h: grid_value(g.h, defaults.map(|d| d.h), "h")?,
        tau: grid_value(g.tau, defaults.map(|d| d.tau), "tau")?,
        radius: grid_value(g.radius, defaults.map(|d| d.radius), "radius")?,
    };
    let x0 = g.x0.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
    if x0.len() != problem.dim() {
        return Err(CliError::config(format!("grid.x0 has {} components, expected {}", x0.len(), problem.dim())));
    }
    Ok(Resolved {
        name,
        problem,
        grid,
        x0,
        analytic,
        stopping,
    })
}

/// Solver settings after applying the mode precedence: command line,
/// then `mode`, then `solver.mode`, then the registry entry's default.
pub fn solver_config(
    cfg: &RunConfig,
    resolved: &Resolved,
    mode: Option<ModeName>,
    tol: Option<f64>,
) -> Result<SolverConfig, CliError> {
    let mut sc = cfg.solver.clone().unwrap_or_default();
    let explicit = mode.or(cfg.mode);
    let r_grid = || cfg.r_grid.clone().unwrap_or_else(|| DEFAULT_R_GRID.to_vec());
    sc.mode = match explicit {
        Some(ModeName::Control) => Mode::Control,
        Some(ModeName::StopVi) => Mode::StoppingVi,
        Some(ModeName::StopControl) => Mode::StoppingControl { r_grid: r_grid() },
        None if sc.mode != Mode::Control => sc.mode,
        None if resolved.stopping => Mode::StoppingVi,
        None => Mode::Control,
    };
    if let Some(tol) = tol {
        sc.tol = tol;
    }
    sc.validate()?;
    Ok(sc)
}

/// Parses `k=v` pairs from `--param`.
pub fn parse_params(items: &[String]) -> Result<BTreeMap<String, f64>, CliError> {
    let mut out = BTreeMap::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--param expects key=value, got '{item}'")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("--param {k}: '{v}' is not a number")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}
