//! Convergence studies and the property suite.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{apply_lh, LatticeGrid, SolutionField};
use crate::problem::{validate_problem, Coefficient, ControlledProblem, Dir, SamplingPlan};
use crate::registry::{Analytic, GridSpec, RegistryProblem};
use crate::solver::{self, min_stencil_weight, residual, solve_mode, solve_streaming, Mode, SolveError, SolverConfig};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("rate fit: {0}")]
    Fit(String),
    #[error("convergence study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Least-squares line through `(log mesh, log error)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Input positions dropped because their error was not positive.
    pub excluded: Vec<usize>,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit, VerifyError> {
    let mut excluded = Vec::new();
    let mut pts = Vec::new();
    for (i, &(mesh, err)) in pairs.iter().enumerate() {
        if !(mesh > 0.0 && mesh.is_finite()) {
            return Err(VerifyError::Fit(format!("mesh size {mesh} at position {i} is not positive")));
        }
        if err > 0.0 && err.is_finite() {
            pts.push((mesh.ln(), err.ln()));
        } else {
            excluded.push(i);
        }
    }
    if pts.len() < 3 {
        return Err(VerifyError::Fit(format!(
            "{} usable points after excluding {} non-positive errors; need 3",
            pts.len(),
            excluded.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(VerifyError::Fit("all mesh sizes are equal".into()));
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - exponent * p.0).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit {
        exponent,
        intercept,
        r_squared,
        excluded,
    })
}

/// What the ladder is measured against.
#[derive(Clone)]
pub enum Reference {
    Analytic(Analytic),
    /// A single finer solve; only the probe values at `t = 0` are kept.
    FineGrid { h: f64, tau: f64 },
    /// Externally estimated values at the probes, e.g. Monte Carlo means.
    Values { values: Vec<f64>, se: Vec<f64>, description: String },
}

impl Reference {
    fn describe(&self) -> String {
        match self {
            Reference::Analytic(_) => "analytic".into(),
            Reference::FineGrid { h, tau } => format!("fine-grid self-reference (h={h}, tau={tau})"),
            Reference::Values { description, .. } => description.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub tau: f64,
    pub h: f64,
    pub error: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub ladder: Vec<Rung>,
    pub reference: String,
    pub probes: Vec<Vec<f64>>,
    pub reference_values: Vec<f64>,
    pub fit_h: Option<RateFit>,
    pub fit_tau: Option<RateFit>,
    /// Every error is within `10·tol`.
    pub exact: bool,
    /// Errors do not grow under refinement.
    pub monotone: bool,
    /// `C` with `error = C(τ^{1/4} + h^{1/2})` at the coarsest rung.
    pub bound_constant: f64,
    /// The calibrated bound holds at every rung.
    pub bound_holds: bool,
}

impl RateReport {
    /// Columns `tau,h,error,runtime_s`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "tau,h,error,runtime_s")?;
        for r in &self.ladder {
            writeln!(w, "{:e},{:e},{:e},{:e}", r.tau, r.h, r.error, r.runtime_s)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `C(τ^{1/4} + h^{1/2})`.
    pub fn bound(&self, tau: f64, h: f64) -> f64 {
        self.bound_constant * (tau.powf(0.25) + h.sqrt())
    }
}

/// Builds the symmetric grid of half-width `round(radius / h)`.
pub fn box_grid(problem: &ControlledProblem, h: f64, tau: f64, radius: f64) -> Result<LatticeGrid, VerifyError> {
    let spec = GridSpec { h, tau, radius };
    if spec.half_width() < 2 {
        return Err(VerifyError::Config(format!("radius {radius} is less than two cells of size {h}")));
    }
    Ok(spec.build(problem, None)?)
}

/// Probe positions on `grid`, each a lattice point in the inner 75% of the box.
fn probe_points(grid: &LatticeGrid, probes: &[Vec<f64>]) -> Result<Vec<usize>, VerifyError> {
    probes
        .iter()
        .map(|x| {
            let p = grid.locate(x).ok_or_else(|| {
                VerifyError::Config(format!("probe {x:?} is not a lattice point at h={}", grid.h()))
            })?;
            if !in_core(grid, p) {
                return Err(VerifyError::Config(format!(
                    "probe {x:?} lies within 25% of the box radius from the boundary at h={}",
                    grid.h()
                )));
            }
            Ok(p)
        })
        .collect()
}

/// Solves on `grid` keeping only level 0.
fn solve_level0(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<Vec<f64>, SolveError> {
    let mut out = Vec::new();
    solve_streaming(problem, grid, config, |level, values, _| {
        if level == 0 {
            out = values.to_vec();
        }
    })?;
    Ok(out)
}

/// Solves every rung of `ladder` (coarse to fine) and measures the largest
/// error over `probes` at `t = 0`. Rates are fitted against `h` and `τ`.
pub fn convergence_study(
    problem: &ControlledProblem,
    reference: &Reference,
    ladder: &[(f64, f64)],
    probes: &[Vec<f64>],
    radius: f64,
    config: &SolverConfig,
) -> Result<RateReport, VerifyError> {
    if ladder.len() < 3 {
        return Err(VerifyError::Config(format!("ladder needs at least 3 rungs, got {}", ladder.len())));
    }
    if ladder.windows(2).any(|w| !(w[1].0 <= w[0].0 && w[1].1 < w[0].1)) {
        return Err(VerifyError::Config("ladder must be sorted from coarse to fine".into()));
    }
    if probes.is_empty() {
        return Err(VerifyError::Config("no probe points".into()));
    }
    // check every probe on every rung before solving anything
    let grids = ladder
        .iter()
        .map(|&(tau, h)| {
            let g = box_grid(problem, h, tau, radius)?;
            let pts = probe_points(&g, probes)?;
            Ok((g, pts))
        })
        .collect::<Result<Vec<_>, VerifyError>>()?;

    let reference_values: Vec<f64> = match reference {
        Reference::Analytic(f) => probes.iter().map(|x| f(0.0, x)).collect(),
        Reference::FineGrid { h, tau } => {
            let g = box_grid(problem, *h, *tau, radius)?;
            let pts = probe_points(&g, probes)?;
            let u0 = solve_level0(problem, &g, config)?;
            pts.iter().map(|&p| u0[p]).collect()
        }
        Reference::Values { values, .. } => {
            if values.len() != probes.len() {
                return Err(VerifyError::Config("reference values and probes differ in length".into()));
            }
            values.clone()
        }
    };

    let mut rungs = Vec::with_capacity(ladder.len());
    for ((g, pts), &(tau, h)) in grids.iter().zip(ladder) {
        let start = Instant::now();
        let u0 = solve_level0(problem, g, config)?;
        let runtime_s = start.elapsed().as_secs_f64();
        let error = pts
            .iter()
            .zip(&reference_values)
            .map(|(&p, r)| (u0[p] - r).abs())
            .fold(0.0, f64::max);
        rungs.push(Rung { tau, h, error, runtime_s });
    }

    let exact = rungs.iter().all(|r| r.error <= 10.0 * config.tol);
    let fit = |mesh: fn(&Rung) -> f64| {
        if exact {
            None
        } else {
            fit_rate(&rungs.iter().map(|r| (mesh(r), r.error)).collect::<Vec<_>>()).ok()
        }
    };
    let fit_h = fit(|r| r.h);
    let fit_tau = fit(|r| r.tau);
    let monotone = rungs.windows(2).all(|w| w[1].error <= w[0].error);
    let first = &rungs[0];
    let bound_constant = first.error / (first.tau.powf(0.25) + first.h.sqrt());
    let bound_holds = rungs
        .iter()
        .all(|r| r.error <= bound_constant * (r.tau.powf(0.25) + r.h.sqrt()) * (1.0 + 1e-12));
    Ok(RateReport {
        ladder: rungs,
        reference: reference.describe(),
        probes: probes.to_vec(),
        reference_values,
        fit_h,
        fit_tau,
        exact,
        monotone,
        bound_constant,
        bound_holds,
    })
}

/// Ladder `τ = h²` over the given spacings.
pub fn coupled_ladder(hs: &[f64]) -> Vec<(f64, f64)> {
    hs.iter().map(|&h| (h * h, h)).collect()
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub problem: String,
    pub passed: bool,
    /// Distance to the failure threshold; negative when failed.
    pub margin: f64,
    pub paper_ref: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn find(&self, name: &str, problem: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name && r.problem == problem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub solver: SolverConfig,
    pub r_grid: Vec<f64>,
    pub perturbations: Vec<f64>,
    /// Spacings for the regularity checks, each with `τ = h²`.
    pub regularity_h: Vec<f64>,
    /// Spacings for the consistency check.
    pub consistency_h: Vec<f64>,
    pub analytic_tolerance: f64,
    /// Allowed change of `u(0, x0)` when the box half-width is doubled.
    pub box_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            solver: SolverConfig::default(),
            r_grid: vec![0.0, 1.0, 10.0, 1e2, 1e3, 1e4],
            perturbations: vec![0.04, 0.02, 0.01],
            regularity_h: vec![0.1, 0.05, 0.025],
            consistency_h: vec![0.1, 0.05],
            analytic_tolerance: 2e-3,
            box_tolerance: 1e-3,
        }
    }
}

const REF_MONOTONE: &str = "monotone scheme: nonnegative stencil weights under the structural assumptions";
const REF_BOUND: &str = "a priori bound u <= 2K^2(T+1) + sup|g|";
const REF_CONTRACTION: &str = "fixed-point map is a contraction with factor below one";
const REF_RESIDUAL: &str = "the discrete equation holds at the returned values";
const REF_CONSISTENCY: &str = "consistency of the difference operators with the generator";
const REF_COMPARISON: &str = "comparison: u1 <= u2 + sup(g1 - g2)+ for ordered data";
const REF_LIPSCHITZ: &str = "Lipschitz continuity in x uniform in the mesh";
const REF_HOLDER: &str = "Hölder-1/2 continuity in t uniform in the mesh";
const REF_DEPENDENCE: &str = "continuous dependence on the coefficients, linear in the perturbation";
const REF_STOPPING: &str = "stopping problem equals the control problem with stopping intensities";
const REF_ANALYTIC: &str = "closed-form value function";
const REF_BOX: &str = "lateral truncation with u = g outside the box; the value at the center is insensitive to the box";

fn result(name: &str, problem: &str, passed: bool, margin: f64, paper_ref: &str, detail: String) -> PropertyResult {
    PropertyResult {
        name: name.into(),
        problem: problem.into(),
        passed,
        margin,
        paper_ref: paper_ref.into(),
        detail,
    }
}

fn failure(name: &str, problem: &str, paper_ref: &str, err: impl std::fmt::Display) -> PropertyResult {
    result(name, problem, false, f64::NEG_INFINITY, paper_ref, err.to_string())
}

/// Applies `edit` to a copy of every control.
fn map_controls(problem: &ControlledProblem, edit: impl Fn(&mut crate::problem::ControlPoint)) -> ControlledProblem {
    let mut p = problem.clone();
    for c in &mut p.controls {
        edit(c);
    }
    p
}

fn sup_diff(a: &SolutionField, b: &SolutionField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `sup |a − b|` over all levels at points in the inner 75% of the box.
fn core_diff(grid: &LatticeGrid, a: &SolutionField, b: &SolutionField) -> f64 {
    let core: Vec<usize> = (0..grid.n_points()).filter(|&p| in_core(grid, p)).collect();
    (0..a.n_levels())
        .map(|j| core.iter().map(|&p| (a.get(j, p) - b.get(j, p)).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// `max(b − a)` over all entries.
fn max_excess(a: &SolutionField, b: &SolutionField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| y - x).fold(f64::NEG_INFINITY, f64::max)
}

/// Worst boundedness and contraction margins seen over a problem's solves.
struct SolveLedger {
    bound_margin: f64,
    bound_detail: String,
    ratio: f64,
    ratio_detail: String,
    solves: usize,
}

impl SolveLedger {
    fn new() -> Self {
        SolveLedger {
            bound_margin: f64::INFINITY,
            bound_detail: String::new(),
            ratio: 0.0,
            ratio_detail: String::new(),
            solves: 0,
        }
    }

    fn record(&mut self, label: &str, problem: &ControlledProblem, grid: &LatticeGrid, field: &SolutionField, tol: f64) {
        self.solves += 1;
        let sup_g = grid
            .terminal_values(problem)
            .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(f64::INFINITY);
        let bound = 2.0 * problem.k * problem.k * (problem.horizon + 1.0) + sup_g;
        let margin = bound + 2.0 * tol - field.max();
        if margin < self.bound_margin {
            self.bound_margin = margin;
            self.bound_detail = format!("{label}: max u = {:.6}, bound = {bound:.6}", field.max());
        }
        for d in &field.diagnostics.levels {
            if d.observed_ratio > self.ratio || self.ratio_detail.is_empty() {
                self.ratio = self.ratio.max(d.observed_ratio);
                self.ratio_detail = format!(
                    "{label}: worst observed ratio {:.6} at t={} ({} iterations, delta bound {:.6})",
                    d.observed_ratio, d.level_time, d.iterations, d.delta_bound
                );
            }
        }
    }
}

fn mode_for(rp: &RegistryProblem) -> Mode {
    if rp.stopping {
        Mode::StoppingVi
    } else {
        Mode::Control
    }
}

/// Runs every property check on every problem. Failures are collected, never raised.
pub fn property_suite(problems: &[RegistryProblem], config: &SuiteConfig) -> SuiteReport {
    let mut results = Vec::new();
    for rp in problems {
        results.extend(problem_properties(rp, config));
    }
    SuiteReport {
        passed: results.iter().all(|r| r.passed),
        results,
    }
}

fn problem_properties(rp: &RegistryProblem, config: &SuiteConfig) -> Vec<PropertyResult> {
    let name = rp.name.as_str();
    let problem = &rp.problem;
    let mode = mode_for(rp);
    let cfg = config.solver.clone().with_mode(mode.clone());
    let tol = cfg.tol;
    let mut out = Vec::new();
    let mut ledger = SolveLedger::new();

    let grid = match rp.grid.build(problem, None) {
        Ok(g) => g,
        Err(e) => return vec![failure("grid", name, "lattice construction", e)],
    };

    // monotonicity: structural assumptions plus explicit weights
    let plan = SamplingPlan::uniform(problem, rp.grid.radius, 9, 3);
    let report = validate_problem(problem, &plan);
    out.push(match min_stencil_weight(problem, &grid, &cfg) {
        Ok(w) => {
            let passed = report.passed && w >= 0.0;
            let mut detail = format!("minimum stencil weight {w:.3e}");
            for v in report.violations.iter().take(3) {
                let _ = write!(detail, "; {}: {}", v.assumption.id(), v.detail);
            }
            result("monotonicity", name, passed, if report.passed { w } else { -1.0 }, REF_MONOTONE, detail)
        }
        Err(e) => {
            let mut r = failure("monotonicity", name, REF_MONOTONE, &e);
            if !report.passed {
                r.detail = format!("{} violations, first {}: {e}", report.violations.len(), report.violations[0].assumption.id());
            }
            r
        }
    });

    let base = match solve_mode(problem, &grid, &cfg) {
        Ok(f) => f,
        Err(e) => {
            out.push(failure("solve", name, REF_RESIDUAL, e));
            return out;
        }
    };
    ledger.record("base", problem, &grid, &base, tol);

    out.push(match residual(problem, &grid, &base, &mode) {
        Ok(r) => {
            let limit = 10.0 * tol;
            result(
                "residual",
                name,
                r.sup <= limit,
                limit - r.sup,
                REF_RESIDUAL,
                format!("sup residual {:.3e} at t={} x={:?}", r.sup, r.t, r.x),
            )
        }
        Err(e) => failure("residual", name, REF_RESIDUAL, e),
    });

    if let Some(exact) = &rp.analytic {
        let center = vec![0.0; problem.dim()];
        out.push(match grid.locate(&center) {
            Some(p) => {
                let err = (base.get(0, p) - exact(0.0, &center)).abs();
                let limit = config.analytic_tolerance;
                result(
                    "analytic",
                    name,
                    err <= limit,
                    limit - err,
                    REF_ANALYTIC,
                    format!("|u(0,0) - exact| = {err:.3e}"),
                )
            }
            None => failure("analytic", name, REF_ANALYTIC, "origin is not a grid point"),
        });
    }

    out.push(box_sensitivity(rp, &grid, &cfg, &base, config, &mut ledger));
    out.push(consistency(rp, config));
    out.extend(comparison(rp, &grid, &cfg, &base, &mut ledger));
    out.extend(regularity(rp, config, &mut ledger));
    if !rp.stopping {
        out.push(dependence(rp, &grid, &cfg, &base, config, &mut ledger));
    } else {
        out.extend(stopping_equivalence(rp, &grid, config, &mut ledger));
    }

    out.push(result(
        "boundedness",
        name,
        ledger.bound_margin >= 0.0,
        ledger.bound_margin,
        REF_BOUND,
        format!("{} solves; tightest {}", ledger.solves, ledger.bound_detail),
    ));
    out.push(result(
        "contraction",
        name,
        ledger.ratio < 1.0,
        1.0 - ledger.ratio,
        REF_CONTRACTION,
        format!("{} solves, all within max_iter; {}", ledger.solves, ledger.ratio_detail),
    ));
    out
}

/// Solves again on a box of twice the half-width and compares at the origin.
fn box_sensitivity(
    rp: &RegistryProblem,
    grid: &LatticeGrid,
    cfg: &SolverConfig,
    base: &SolutionField,
    config: &SuiteConfig,
    ledger: &mut SolveLedger,
) -> PropertyResult {
    let name = rp.name.as_str();
    let wide_spec = GridSpec {
        radius: 2.0 * rp.grid.radius,
        ..rp.grid
    };
    let wide = match wide_spec.build(&rp.problem, None) {
        Ok(g) => g,
        Err(e) => return failure("box_sensitivity", name, REF_BOX, e),
    };
    let field = match solve_mode(&rp.problem, &wide, cfg) {
        Ok(f) => f,
        Err(e) => return failure("box_sensitivity", name, REF_BOX, e),
    };
    ledger.record("doubled box", &rp.problem, &wide, &field, cfg.tol);
    let x0 = grid.x0().to_vec();
    match (grid.locate(&x0), wide.locate(&x0)) {
        (Some(p), Some(q)) => {
            let diff = (base.get(0, p) - field.get(0, q)).abs();
            let limit = config.box_tolerance;
            result(
                "box_sensitivity",
                name,
                diff <= limit,
                limit - diff,
                REF_BOX,
                format!("radius {} vs {}: |du(0, x0)| = {diff:.3e}", rp.grid.radius, wide_spec.radius),
            )
        }
        _ => failure("box_sensitivity", name, REF_BOX, "x0 is not a grid point"),
    }
}

fn consistency(rp: &RegistryProblem, config: &SuiteConfig) -> PropertyResult {
    let name = rp.name.as_str();
    let problem = &rp.problem;
    let d = problem.dim();
    let z: Vec<f64> = [0.7, 0.4, 0.3].iter().copied().cycle().take(d).collect();
    let phi = |x: &[f64]| x.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
    let t = 0.0;
    let symmetric = problem.controls.iter().all(|c| {
        c.b_plus.iter().zip(&c.b_minus).all(|(p, m)| match (p, m) {
            (Coefficient::Const(a), Coefficient::Const(b)) => a == b,
            _ => false,
        })
    });
    let required = if symmetric { 2.0 } else { 1.0 };
    let mut errors = Vec::new();
    for &h in &config.consistency_h {
        let grid = match box_grid(problem, h, 1.0, 1.0) {
            Ok(g) => g,
            Err(e) => return failure("consistency", name, REF_CONSISTENCY, e),
        };
        let values: Vec<f64> = (0..grid.n_points()).map(|p| phi(grid.coord(p)).cos()).collect();
        let mut worst: f64 = 0.0;
        for &p in grid.interior_points() {
            let x = grid.coord(p);
            if x.iter().any(|v| v.abs() > 0.5) {
                continue;
            }
            for idx in 0..problem.controls.len() {
                let discrete = match apply_lh(problem, idx, &grid, &values, t, p) {
                    Ok(v) => v,
                    Err(e) => return failure("consistency", name, REF_CONSISTENCY, e),
                };
                let Ok((a, beta)) = problem.continuous_coefficients(idx, t, x) else {
                    return failure("consistency", name, REF_CONSISTENCY, "coefficient evaluation failed");
                };
                let c = problem.controls[idx].c.eval(t, x).unwrap_or(f64::NAN);
                let (cs, sn) = (phi(x).cos(), phi(x).sin());
                let mut exact = -c * cs;
                for i in 0..d {
                    exact -= beta[i] * z[i] * sn;
                    for j in 0..d {
                        exact -= a[(i, j)] * z[i] * z[j] * cs;
                    }
                }
                worst = worst.max((discrete - exact).abs());
            }
        }
        errors.push((h, worst));
    }
    let (h0, e0) = errors[0];
    let (h1, e1) = errors[errors.len() - 1];
    if e1 <= 1e-12 {
        return result("consistency", name, true, 1.0, REF_CONSISTENCY, format!("errors {errors:?}: exact"));
    }
    let order = (e0 / e1).ln() / (h0 / h1).ln();
    // measured between two meshes, so allow the pre-asymptotic 5%
    let threshold = 0.95 * required;
    result(
        "consistency",
        name,
        order >= threshold,
        order - threshold,
        REF_CONSISTENCY,
        format!("observed order {order:.3} (required {required}); errors {errors:?}"),
    )
}

fn comparison(
    rp: &RegistryProblem,
    grid: &LatticeGrid,
    cfg: &SolverConfig,
    base: &SolutionField,
    ledger: &mut SolveLedger,
) -> Vec<PropertyResult> {
    let name = rp.name.as_str();
    let problem = &rp.problem;
    let tol = cfg.tol;
    let mut raised_g = problem.clone();
    raised_g.g = problem.g.shifted(0.1);
    let variants: Vec<(&str, ControlledProblem)> = vec![
        ("f+0.1", map_controls(problem, |c| c.f = c.f.shifted(0.1))),
        ("g+0.1", raised_g),
        ("f+0.1,g+0.1", {
            let mut p = map_controls(problem, |c| c.f = c.f.shifted(0.1));
            p.g = problem.g.shifted(0.1);
            p
        }),
        ("first f+0.2", {
            let mut p = problem.clone();
            p.controls[0].f = p.controls[0].f.shifted(0.2);
            p
        }),
    ];
    let mut margin = f64::INFINITY;
    let mut detail = String::new();
    for (label, p) in &variants {
        match solve_mode(p, grid, cfg) {
            Ok(f) => {
                ledger.record(label, p, grid, &f, tol);
                // u_low ≤ u_high + 2 tol everywhere
                let m = 2.0 * tol - max_excess(&f, base);
                if m < margin {
                    margin = m;
                    detail = format!("{label}: max(u_low - u_high) = {:.3e}", max_excess(&f, base));
                }
            }
            Err(e) => return vec![failure("comparison", name, REF_COMPARISON, format!("{label}: {e}"))],
        }
    }
    let mut out = vec![result("comparison", name, margin >= 0.0, margin, REF_COMPARISON, detail)];

    // constant shift of g: 0 ≤ u2 − u1 ≤ 0.5
    let mut shifted = problem.clone();
    shifted.g = problem.g.shifted(0.5);
    out.push(match solve_mode(&shifted, grid, cfg) {
        Ok(f) => {
            ledger.record("g+0.5", &shifted, grid, &f, tol);
            let up = max_excess(base, &f);
            let down = max_excess(&f, base);
            let margin = (0.5 + 2.0 * tol - up).min(2.0 * tol - down);
            result(
                "comparison_shift",
                name,
                margin >= 0.0,
                margin,
                REF_COMPARISON,
                format!("u(g+0.5) - u(g) in [{:.6}, {:.6}]", -down, up),
            )
        }
        Err(e) => failure("comparison_shift", name, REF_COMPARISON, e),
    });
    out
}

/// Whether `p` lies in the inner 75% of the index box on every axis.
fn in_core(grid: &LatticeGrid, p: usize) -> bool {
    grid.multi_index(p).iter().zip(grid.index_box()).all(|(&i, (lo, hi))| {
        let half = (hi - lo) as f64 / 2.0;
        (i as f64 - (hi + lo) as f64 / 2.0).abs() <= 0.75 * half
    })
}

/// Largest `|u(x + hℓ) − u(x)| / (h|ℓ|)` over all levels, away from the
/// lateral boundary where `u = g` is imposed.
fn max_gradient(grid: &LatticeGrid, field: &SolutionField) -> f64 {
    let d1 = grid.basis().pairs();
    let core: Vec<usize> = grid.interior_points().iter().copied().filter(|&p| in_core(grid, p)).collect();
    let mut best: f64 = 0.0;
    for j in 0..field.n_levels() {
        let u = field.level(j);
        for &p in &core {
            for pair in 0..d1 {
                let q = grid.neighbor(p, Dir::plus(pair)).expect("interior");
                let len = grid.h() * grid.basis().norm(pair);
                best = best.max((u[q] - u[p]).abs() / len);
            }
        }
    }
    best
}

/// Largest `|u(t, x0) − u(0, x0)| / √t` at the grid center.
fn holder_quotient(grid: &LatticeGrid, field: &SolutionField) -> Option<f64> {
    let p = grid.locate(&vec![0.0; grid.dim()])?;
    let u0 = field.get(0, p);
    Some(
        (1..field.n_levels())
            .map(|j| (field.get(j, p) - u0).abs() / grid.time(j).sqrt())
            .fold(0.0, f64::max),
    )
}

fn regularity(rp: &RegistryProblem, config: &SuiteConfig, ledger: &mut SolveLedger) -> Vec<PropertyResult> {
    let name = rp.name.as_str();
    let problem = &rp.problem;
    let cfg = config.solver.clone().with_mode(mode_for(rp));
    let mut grads = Vec::new();
    let mut holders = Vec::new();
    for &h in &config.regularity_h {
        let grid = match box_grid(problem, h, h * h, rp.grid.radius) {
            Ok(g) => g,
            Err(e) => return vec![failure("lipschitz_x", name, REF_LIPSCHITZ, e)],
        };
        match solve_mode(problem, &grid, &cfg) {
            Ok(f) => {
                ledger.record(&format!("h={h}"), problem, &grid, &f, cfg.tol);
                grads.push(max_gradient(&grid, &f));
                holders.push(holder_quotient(&grid, &f).unwrap_or(f64::NAN));
            }
            Err(e) => return vec![failure("lipschitz_x", name, REF_LIPSCHITZ, e)],
        }
    }
    // each refinement may grow the quantity by at most 10%
    let check = |v: &[f64]| {
        v.windows(2)
            .map(|w| 1.1 * w[0] - w[1])
            .fold(f64::INFINITY, f64::min)
    };
    let (mg, mh) = (check(&grads), check(&holders));
    vec![
        result(
            "lipschitz_x",
            name,
            mg >= 0.0,
            mg,
            REF_LIPSCHITZ,
            format!("max x-gradient over h={:?}: {grads:?}", config.regularity_h),
        ),
        result(
            "holder_t",
            name,
            mh >= 0.0,
            mh,
            REF_HOLDER,
            format!("t-Hölder quotient at the center over h={:?}: {holders:?}", config.regularity_h),
        ),
    ]
}

/// Problem with `σ`, `b_+`, `c`, `f` of every control raised by `eps`.
pub fn perturbed(problem: &ControlledProblem, eps: f64) -> ControlledProblem {
    map_controls(problem, |c| {
        for s in &mut c.sigma {
            *s = s.shifted(eps);
        }
        for b in &mut c.b_plus {
            *b = b.shifted(eps);
        }
        c.c = c.c.shifted(eps);
        c.f = c.f.shifted(eps);
    })
}

fn dependence(
    rp: &RegistryProblem,
    grid: &LatticeGrid,
    cfg: &SolverConfig,
    base: &SolutionField,
    config: &SuiteConfig,
    ledger: &mut SolveLedger,
) -> PropertyResult {
    let name = rp.name.as_str();
    let mut pairs = Vec::new();
    for &eps in &config.perturbations {
        let p = perturbed(&rp.problem, eps);
        match solve_mode(&p, grid, cfg) {
            Ok(f) => {
                ledger.record(&format!("eps={eps}"), &p, grid, &f, cfg.tol);
                pairs.push((eps, core_diff(grid, &f, base)));
            }
            Err(e) => return failure("continuous_dependence", name, REF_DEPENDENCE, e),
        }
    }
    match fit_rate(&pairs) {
        Ok(fit) => result(
            "continuous_dependence",
            name,
            fit.exponent >= 0.9,
            fit.exponent - 0.9,
            REF_DEPENDENCE,
            format!("sup |u_eps - u| away from the boundary = {pairs:?}, slope {:.4}", fit.exponent),
        ),
        Err(e) => failure("continuous_dependence", name, REF_DEPENDENCE, e),
    }
}

fn stopping_equivalence(
    rp: &RegistryProblem,
    grid: &LatticeGrid,
    config: &SuiteConfig,
    ledger: &mut SolveLedger,
) -> Vec<PropertyResult> {
    let name = rp.name.as_str();
    let problem = &rp.problem;
    let tol = config.solver.tol;
    let vi = match solver::solve_stopping_vi(problem, grid, &config.solver) {
        Ok(f) => f,
        Err(e) => return vec![failure("stopping_equivalence", name, REF_STOPPING, e)],
    };
    let mut fields = Vec::new();
    for k in 1..=config.r_grid.len() {
        let r_grid = &config.r_grid[..k];
        match solver::solve_stopping_control(problem, grid, r_grid, &config.solver) {
            Ok(f) => {
                ledger.record(&format!("r_max={}", r_grid[k - 1]), problem, grid, &f, tol);
                fields.push(f);
            }
            Err(e) => return vec![failure("stopping_equivalence", name, REF_STOPPING, e)],
        }
    }
    let last = fields.last().expect("r_grid is nonempty");
    let diff = sup_diff(&vi, last);
    let limit = (10.0 * tol).max(5e-4);
    let mono = fields
        .windows(2)
        .map(|w| 2.0 * tol - max_excess(&w[1], &w[0]))
        .fold(f64::INFINITY, f64::min);
    let diffs: Vec<String> = fields.iter().map(|f| format!("{:.3e}", sup_diff(&vi, f))).collect();
    vec![
        result(
            "stopping_equivalence",
            name,
            diff <= limit,
            limit - diff,
            REF_STOPPING,
            format!("sup |u_vi - u_r| by r_max {:?}: [{}]", config.r_grid, diffs.join(", ")),
        ),
        result(
            "stopping_monotone_r",
            name,
            mono >= 0.0,
            mono,
            REF_STOPPING,
            "control-form values nondecreasing in r_max".into(),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fit_examples() {
        let f = fit_rate(&[(0.1, 0.01), (0.05, 0.0025), (0.025, 0.000625)]).unwrap();
        assert_abs_diff_eq!(f.exponent, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        let f = fit_rate(&[(0.1, 0.3), (0.05, 0.3), (0.025, 0.3)]).unwrap();
        assert_abs_diff_eq!(f.exponent, 0.0, epsilon = 1e-12);
        assert_eq!(f.r_squared, 1.0);
        let f = fit_rate(&[(0.2, 0.04), (0.1, 0.01), (0.05, 0.0), (0.025, 0.000625)]).unwrap();
        assert_eq!(f.excluded, vec![2]);
        assert_abs_diff_eq!(f.exponent, 2.0, epsilon = 1e-12);
        assert!(fit_rate(&[(0.1, 0.0), (0.05, 0.1), (0.025, 0.01)]).is_err());
    }

    #[test]
    fn exact_problem_is_flagged() {
        let rp = crate::registry::default_problem("exact1d").unwrap();
        let reference = Reference::Analytic(rp.analytic.clone().unwrap());
        let rep = convergence_study(
            &rp.problem,
            &reference,
            &coupled_ladder(&[0.2, 0.1, 0.05]),
            &[vec![0.0], vec![0.2]],
            1.0,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(rep.exact);
        assert!(rep.fit_h.is_none());
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("tau,h,error,runtime_s\n"));
    }

    #[test]
    fn probes_must_be_shared_and_inside() {
        let rp = crate::registry::default_problem("heat1d").unwrap();
        let reference = Reference::Analytic(rp.analytic.clone().unwrap());
        let ladder = coupled_ladder(&[0.2, 0.1, 0.05]);
        let cfg = SolverConfig::default();
        let off = convergence_study(&rp.problem, &reference, &ladder, &[vec![0.3]], 2.0, &cfg);
        assert!(matches!(off, Err(VerifyError::Config(_))));
        let edge = convergence_study(&rp.problem, &reference, &ladder, &[vec![1.8]], 2.0, &cfg);
        assert!(matches!(edge, Err(VerifyError::Config(_))));
    }

    #[test]
    fn negated_drift_fails_monotonicity() {
        let mut rp = crate::registry::default_problem("heat1d").unwrap();
        rp.problem.controls[0].b_plus[0] = Coefficient::Const(-1.0);
        rp.grid.radius = 1.0;
        rp.grid.h = 0.1;
        rp.grid.tau = 0.01;
        rp.problem.horizon = 0.1;
        let rep = property_suite(std::slice::from_ref(&rp), &SuiteConfig::default());
        assert!(!rep.passed);
        let m = rep.find("monotonicity", "heat1d").unwrap();
        assert!(!m.passed);
        assert!(m.detail.contains("b_k >= 0"), "{}", m.detail);
    }
}
