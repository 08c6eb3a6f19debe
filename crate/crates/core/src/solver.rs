//! Backward-in-time solver for the normalized finite-difference Bellman
//! problem `max_α m^α (δ_τ u + L_h^α u + f^α) = 0` with `u = g` off the
//! interior, and its two optimal-stopping variants.
//!
//! Each time level is solved by the fixed-point iteration
//! `u ← u + ε·max_α m^α(δ_τ u + L_h^α u + f^α)`, which only reads the level
//! itself and the already-solved level above it. With `ε` small enough every
//! neighbor enters with a nonnegative weight and the weights sum to
//! `1 − ε m^α(1/τ_T + c^α)`, so the map contracts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::grid::{
    apply_lh, delta_tau, GridError, LatticeGrid, LevelDiagnostics, SolutionField, SolveDiagnostics, STOP,
};
use crate::problem::{ControlledProblem, Dir};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("solver configuration: {0}")]
    Config(String),
    #[error("control '{control}' at t={t} x={x:?}: {detail}")]
    Assumption {
        control: String,
        t: f64,
        x: Vec<f64>,
        detail: String,
    },
    #[error("no convergence at t={level_time} after {iterations} iterations (last update {last_update:e})")]
    Convergence {
        level_time: f64,
        iterations: usize,
        last_update: f64,
    },
    #[error("iterate became non-finite at t={level_time}, iteration {iteration}; some weight is negative")]
    Divergence { level_time: f64, iteration: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which equation is solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pure control: `max_α m^α(δ_τ u + L_h^α u + f^α) = 0`.
    Control,
    /// Obstacle form: `u = max(g, G[u])` at every interior point.
    StoppingVi,
    /// Control set augmented with stopping intensities `r`.
    StoppingControl { r_grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Fixed-point step; `0` selects it per level from the coefficients.
    pub epsilon: f64,
    /// Fraction of the largest admissible step used in auto mode.
    pub safety: f64,
    /// Discount of the space-time weight in [`solve_global`]; must be in `(0, 1]`.
    pub gamma: f64,
    /// Target sup-norm distance to the fixed point, and residual target.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: Mode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.0,
            safety: 0.99,
            gamma: 1.0,
            tol: 1e-10,
            max_iter: 10_000,
            mode: Mode::Control,
        }
    }
}

impl SolverConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: String| Err(SolveError::Config(m));
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return bad(format!("safety must be in (0, 1], got {}", self.safety));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if let Mode::StoppingControl { r_grid } = &self.mode {
            validate_r_grid(r_grid)?;
        }
        Ok(())
    }
}

fn validate_r_grid(r_grid: &[f64]) -> Result<(), SolveError> {
    let ok = r_grid.first() == Some(&0.0)
        && r_grid.iter().all(|r| r.is_finite() && *r >= 0.0)
        && r_grid.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(SolveError::Config(format!(
            "r_grid must be finite, nonnegative, strictly increasing and start at 0; got {r_grid:?}"
        )))
    }
}

/// One entry of the effective control list: a base control, optionally
/// augmented with stopping intensity `r` (`c + r`, `f + r g`, `m ∧ 1/(1+r)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveControl {
    pub base: usize,
    pub r: f64,
    pub m: f64,
}

pub fn effective_controls(problem: &ControlledProblem, mode: &Mode) -> Vec<EffectiveControl> {
    match mode {
        Mode::StoppingControl { r_grid } => problem
            .controls
            .iter()
            .enumerate()
            .flat_map(|(base, c)| {
                r_grid.iter().map(move |&r| EffectiveControl {
                    base,
                    r,
                    m: c.m.min(1.0 / (1.0 + r)),
                })
            })
            .collect(),
        _ => problem
            .controls
            .iter()
            .enumerate()
            .map(|(base, c)| EffectiveControl { base, r: 0.0, m: c.m })
            .collect(),
    }
}

/// Interior points below which a sweep stays on one thread.
const PARALLEL_MIN: usize = 4096;

/// Coefficients of every effective control at every interior point of one level.
struct LevelCoefficients {
    n_int: usize,
    d1: usize,
    m: Vec<f64>,
    /// `σ_k²/h² = 2a_k/h²`, `[ctl][point][pair]`.
    s2: Vec<f64>,
    /// `b_k/h`, `[ctl][point][slot]`.
    bh: Vec<f64>,
    c: Vec<f64>,
    f: Vec<f64>,
    /// Per control: `max_points Σ_{±k}(2a_k/h² + b_k/h) + c`.
    spatial_max: Vec<f64>,
    /// Per control: `min_points c`.
    c_min: Vec<f64>,
}

impl LevelCoefficients {
    fn build(
        problem: &ControlledProblem,
        grid: &LatticeGrid,
        controls: &[EffectiveControl],
        g: &[f64],
        t: f64,
    ) -> Result<Self, SolveError> {
        let d1 = grid.basis().pairs();
        let n_int = grid.interior_points().len();
        let n_ctl = controls.len();
        let h = grid.h();
        let mut lc = LevelCoefficients {
            n_int,
            d1,
            m: controls.iter().map(|e| e.m).collect(),
            s2: Vec::with_capacity(n_ctl * n_int * d1),
            bh: Vec::with_capacity(n_ctl * n_int * 2 * d1),
            c: Vec::with_capacity(n_ctl * n_int),
            f: Vec::with_capacity(n_ctl * n_int),
            spatial_max: vec![0.0; n_ctl],
            c_min: vec![f64::INFINITY; n_ctl],
        };
        for (e, eff) in controls.iter().enumerate() {
            let ctl = &problem.controls[eff.base];
            for &p in grid.interior_points() {
                let x = grid.coord(p);
                let fail = |detail: String| SolveError::Assumption {
                    control: ctl.label.clone(),
                    t,
                    x: x.to_vec(),
                    detail,
                };
                let mut spatial = 0.0;
                for pair in 0..d1 {
                    let s = ctl.sigma[pair].eval(t, x)?;
                    if !s.is_finite() {
                        return Err(fail(format!("sigma_{} = {s}", pair + 1)));
                    }
                    let v = s * s / (h * h);
                    spatial += 2.0 * v;
                    lc.s2.push(v);
                }
                for dir in Dir::all(d1) {
                    let b = ctl.b(dir).eval(t, x)?;
                    if !(b >= 0.0 && b.is_finite()) {
                        return Err(fail(format!("b_{dir} = {b} must be finite and nonnegative")));
                    }
                    spatial += b / h;
                    lc.bh.push(b / h);
                }
                let c = ctl.c.eval(t, x)? + eff.r;
                let f = ctl.f.eval(t, x)? + if eff.r > 0.0 { eff.r * g[p] } else { 0.0 };
                if !c.is_finite() || !f.is_finite() {
                    return Err(fail(format!("c = {c}, f = {f} must be finite")));
                }
                spatial += c;
                lc.c.push(c);
                lc.f.push(f);
                lc.spatial_max[e] = lc.spatial_max[e].max(spatial);
                lc.c_min[e] = lc.c_min[e].min(c);
            }
        }
        Ok(lc)
    }

    fn n_ctl(&self) -> usize {
        self.m.len()
    }

    /// Largest admissible step: every weight nonnegative.
    fn epsilon_bound(&self, inv_step: f64) -> f64 {
        let worst = (0..self.n_ctl())
            .map(|e| self.m[e] * (inv_step + self.spatial_max[e]))
            .fold(0.0, f64::max);
        1.0 / worst
    }

    /// Contraction factor `1 − ε min_α m^α (1/τ_T + c^α)` of the level map.
    fn delta(&self, eps: f64, inv_step: f64) -> f64 {
        if self.n_int == 0 {
            return 0.0;
        }
        let mass = (0..self.n_ctl())
            .map(|e| self.m[e] * (inv_step + self.c_min[e]))
            .fold(f64::INFINITY, f64::min);
        1.0 - eps * mass
    }

    /// `max_α m^α(δ_τu + L_h^αu + f^α)` at interior point `n` and its argmax.
    #[inline]
    fn best(&self, n: usize, p: usize, nb: &[usize], u: &[f64], next: f64, inv_step: f64) -> (f64, u32) {
        let d1 = self.d1;
        let up = u[p];
        let dt = (next - up) * inv_step;
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0u32;
        if d1 == 1 {
            let (right, left) = (u[nb[0]] - up, u[nb[1]] - up);
            for e in 0..self.n_ctl() {
                let row = e * self.n_int + n;
                let acc = dt
                    + self.s2[row] * (right + left)
                    + self.bh[2 * row] * right
                    + self.bh[2 * row + 1] * left
                    + (self.f[row] - self.c[row] * up);
                let val = self.m[e] * acc;
                if val > best {
                    best = val;
                    arg = e as u32;
                }
            }
            return (best, arg);
        }
        for e in 0..self.n_ctl() {
            let row = e * self.n_int + n;
            let s2 = &self.s2[row * d1..(row + 1) * d1];
            let bh = &self.bh[row * 2 * d1..(row + 1) * 2 * d1];
            let mut acc = dt;
            for pair in 0..d1 {
                acc += s2[pair] * (u[nb[pair]] + u[nb[d1 + pair]] - 2.0 * up);
            }
            for (slot, w) in bh.iter().enumerate() {
                acc += w * (u[nb[slot]] - up);
            }
            acc += self.f[row] - self.c[row] * up;
            let val = self.m[e] * acc;
            if val > best {
                best = val;
                arg = e as u32;
            }
        }
        (best, arg)
    }

    fn sweep(&self, grid: &LatticeGrid, u: &[f64], next: &[f64], inv_step: f64, best: &mut [f64], arg: &mut [u32]) {
        let interior = grid.interior_points();
        let point = |n: usize, b: &mut f64, a: &mut u32| {
            let p = interior[n];
            let (v, i) = self.best(n, p, grid.neighbor_slots(n), u, next[p], inv_step);
            *b = v;
            *a = i;
        };
        // points are independent, so the split does not affect the result
        if rayon::current_num_threads() == 1 || best.len() < PARALLEL_MIN {
            for (n, (b, a)) in best.iter_mut().zip(arg.iter_mut()).enumerate() {
                point(n, b, a);
            }
        } else {
            best.par_iter_mut()
                .zip(arg.par_iter_mut())
                .enumerate()
                .with_min_len(PARALLEL_MIN / 2)
                .for_each(|(n, (b, a))| point(n, b, a));
        }
    }
}

/// Solution of one level with its statistics.
#[derive(Debug, Clone)]
pub struct LevelSolution {
    pub values: Vec<f64>,
    /// Maximizing effective control per point; [`STOP`] off the interior
    /// and where the obstacle is active.
    pub policy: Vec<u32>,
    pub iterations: usize,
    pub observed_ratio: f64,
    pub diagnostics: LevelDiagnostics,
}

/// Context shared by all levels of one solve.
struct LevelSolver<'a> {
    problem: &'a ControlledProblem,
    grid: &'a LatticeGrid,
    config: &'a SolverConfig,
    controls: Vec<EffectiveControl>,
    obstacle: bool,
    g: Vec<f64>,
    /// Coefficients reused across levels when nothing depends on time.
    cached: Option<LevelCoefficients>,
    time_dependent: bool,
}

impl<'a> LevelSolver<'a> {
    fn new(problem: &'a ControlledProblem, grid: &'a LatticeGrid, config: &'a SolverConfig) -> Result<Self, SolveError> {
        config.validate()?;
        if grid.dim() != problem.dim() || grid.basis() != &problem.basis {
            return Err(SolveError::Config("grid and problem use different direction bases".into()));
        }
        if (grid.horizon() - problem.horizon).abs() > 1e-12 * problem.horizon {
            return Err(SolveError::Config(format!(
                "grid horizon {} differs from problem horizon {}",
                grid.horizon(),
                problem.horizon
            )));
        }
        let g = grid.terminal_values(problem)?;
        if let Some(p) = g.iter().position(|v| !v.is_finite()) {
            return Err(SolveError::Assumption {
                control: String::new(),
                t: problem.horizon,
                x: grid.coord(p).to_vec(),
                detail: "terminal reward is not finite".into(),
            });
        }
        let controls = effective_controls(problem, &config.mode);
        let time_dependent = problem
            .controls
            .iter()
            .any(|c| c.coefficients().any(|k| k.depends_on_time()));
        Ok(LevelSolver {
            problem,
            grid,
            config,
            controls,
            obstacle: config.mode == Mode::StoppingVi,
            g,
            cached: None,
            time_dependent,
        })
    }

    fn coefficients(&mut self, t: f64) -> Result<&LevelCoefficients, SolveError> {
        if self.time_dependent || self.cached.is_none() {
            self.cached = Some(LevelCoefficients::build(
                self.problem,
                self.grid,
                &self.controls,
                &self.g,
                t,
            )?);
        }
        Ok(self.cached.as_ref().expect("just built"))
    }

    /// `after` is the level two steps up, used to extrapolate the initial guess.
    fn solve_level(&mut self, level: usize, next: &[f64], after: Option<&[f64]>) -> Result<LevelSolution, SolveError> {
        let grid = self.grid;
        let config = self.config;
        let obstacle = self.obstacle;
        let t = grid.time(level);
        let inv_step = 1.0 / grid.step(level)?;
        let g = self.g.clone();
        let coeffs = self.coefficients(t)?;

        let bound = coeffs.epsilon_bound(inv_step);
        let eps = if config.epsilon > 0.0 {
            if config.epsilon > bound * (1.0 + 1e-12) {
                return Err(SolveError::Config(format!(
                    "epsilon {} exceeds the admissible step {bound} at t={t}; weights would be negative",
                    config.epsilon
                )));
            }
            config.epsilon
        } else {
            config.safety * bound
        };
        let delta = coeffs.delta(eps, inv_step);

        let interior = grid.interior_points();
        let n_int = interior.len();
        let mut u: Vec<f64> = next.to_vec();
        if let Some(after) = after {
            let ratio = grid.step(level)? / grid.step(level + 1)?;
            for &p in interior {
                u[p] += ratio * (next[p] - after[p]);
                if obstacle && u[p] < g[p] {
                    u[p] = g[p];
                }
            }
        }
        for p in 0..grid.n_points() {
            if !grid.is_interior(p) {
                u[p] = g[p];
            }
        }
        let mut best = vec![0.0; n_int];
        let mut arg = vec![0u32; n_int];

        let mut prev_update = f64::NAN;
        let mut ratios = (f64::NAN, f64::NAN);
        let mut observed_ratio: f64 = 0.0;
        let mut iterations = 0;
        let mut last_update;
        loop {
            iterations += 1;
            coeffs.sweep(grid, &u, next, inv_step, &mut best, &mut arg);
            let mut update: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for n in 0..n_int {
                let p = interior[n];
                let mut v = u[p] + eps * best[n];
                if obstacle && v < g[p] {
                    v = g[p];
                }
                update = update.max((v - u[p]).abs());
                scale = scale.max(v.abs());
                u[p] = v;
            }
            last_update = update;
            if !update.is_finite() {
                return Err(SolveError::Divergence {
                    level_time: t,
                    iteration: iterations,
                });
            }
            let floor = 8.0 * f64::EPSILON * scale;
            if prev_update > 1e5 * floor {
                let r = update / prev_update;
                observed_ratio = observed_ratio.max(r);
                ratios = (r, ratios.0);
            }
            let dhat = if ratios.0.is_nan() {
                delta
            } else {
                delta.min(ratios.0.max(ratios.1.max(0.0)))
            };
            let banach = if dhat <= 0.0 { 0.0 } else { update * dhat / (1.0 - dhat) };
            if update == 0.0 || update <= floor || (update <= config.tol * eps && banach <= config.tol) {
                break;
            }
            if iterations >= config.max_iter {
                return Err(SolveError::Convergence {
                    level_time: t,
                    iterations,
                    last_update: update,
                });
            }
            prev_update = update;
        }

        // residual and policy of the returned values
        coeffs.sweep(grid, &u, next, inv_step, &mut best, &mut arg);
        let mut residual: f64 = 0.0;
        let mut policy = vec![STOP; grid.n_points()];
        for n in 0..n_int {
            let p = interior[n];
            let r = if obstacle {
                complementarity(u[p] - g[p], best[n])
            } else {
                best[n].abs()
            };
            residual = residual.max(r);
            let stopped = obstacle && u[p] == g[p] && best[n] < 0.0;
            policy[p] = if stopped { STOP } else { arg[n] };
        }

        Ok(LevelSolution {
            values: u,
            policy,
            iterations,
            observed_ratio,
            diagnostics: LevelDiagnostics {
                level_time: t,
                iterations,
                final_update: last_update,
                observed_ratio,
                epsilon: eps,
                delta_bound: delta,
                residual,
            },
        })
    }
}

/// Residual of the obstacle problem at one point, from `u − g` and the
/// scheme expression: zero iff `u ≥ g`, `E ≤ 0` and one of them is tight.
fn complementarity(gap: f64, expression: f64) -> f64 {
    (-gap).max(expression).max(gap.min(-expression)).max(0.0)
}

/// `safety` times the largest step for which all fixed-point weights are
/// nonnegative on every level, i.e.
/// `1 / max m^α(γ/τ + Σ_{±k}(2a_k/h² + b_k/h) + ν + c^α)` with `ν = (1−γ)/τ`,
/// where `γ/τ + ν = 1/τ` and `τ` is the level's own step.
pub fn max_epsilon(problem: &ControlledProblem, grid: &LatticeGrid, safety: f64) -> Result<f64, SolveError> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(SolveError::Config(format!("safety must be in (0, 1], got {safety}")));
    }
    let controls = effective_controls(problem, &Mode::Control);
    let g = grid.terminal_values(problem)?;
    let mut eps = f64::INFINITY;
    let mut cached: Option<LevelCoefficients> = None;
    let time_dependent = problem
        .controls
        .iter()
        .any(|c| c.coefficients().any(|k| k.depends_on_time()));
    for level in 0..grid.n_levels() - 1 {
        if time_dependent || cached.is_none() {
            cached = Some(LevelCoefficients::build(problem, grid, &controls, &g, grid.time(level))?);
        }
        let lc = cached.as_ref().expect("built");
        eps = eps.min(lc.epsilon_bound(1.0 / grid.step(level)?));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(SolveError::Config("no admissible step: coefficient supremum vanishes".into()));
    }
    Ok(safety * eps)
}

/// Smallest weight of the fixed-point map over all levels, points and
/// effective controls: the neighbor weights `ε m(σ²/h² + b/h)`, the weight
/// `ε m/τ_T` of the level above and the self weight
/// `1 − ε m(1/τ_T + Σ_{±k}(2a_k/h² + b_k/h) + c)`. The map is monotone iff
/// this is nonnegative.
pub fn min_stencil_weight(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<f64, SolveError> {
    let mut ls = LevelSolver::new(problem, grid, config)?;
    let mut min_w = f64::INFINITY;
    for level in 0..grid.n_levels() - 1 {
        let inv_step = 1.0 / grid.step(level)?;
        let eps_cfg = config.epsilon;
        let safety = config.safety;
        let lc = ls.coefficients(grid.time(level))?;
        let eps = if eps_cfg > 0.0 { eps_cfg } else { safety * lc.epsilon_bound(inv_step) };
        let d1 = lc.d1;
        for e in 0..lc.n_ctl() {
            let m = lc.m[e];
            for n in 0..lc.n_int {
                let row = e * lc.n_int + n;
                let s2 = &lc.s2[row * d1..(row + 1) * d1];
                let bh = &lc.bh[row * 2 * d1..(row + 1) * 2 * d1];
                let mut total = inv_step + lc.c[row];
                for (slot, b) in bh.iter().enumerate() {
                    let w = s2[slot % d1] + b;
                    min_w = min_w.min(eps * m * w);
                    total += w;
                }
                min_w = min_w.min(eps * m * inv_step).min(1.0 - eps * m * total);
            }
        }
    }
    Ok(min_w)
}

/// Solves one non-final level given the level above it (control mode
/// unless `config.mode` says otherwise).
pub fn fixed_point_level(
    problem: &ControlledProblem,
    grid: &LatticeGrid,
    level: usize,
    next_level: &[f64],
    config: &SolverConfig,
) -> Result<LevelSolution, SolveError> {
    if next_level.len() != grid.n_points() {
        return Err(SolveError::Config(format!(
            "next level has {} values, grid has {} points",
            next_level.len(),
            grid.n_points()
        )));
    }
    if next_level.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::Config("next level contains non-finite values".into()));
    }
    let mut ls = LevelSolver::new(problem, grid, config)?;
    ls.solve_level(level, next_level, None)
}

/// Runs the backward induction, handing every finished level to `sink`
/// (final level first). Returns the diagnostics, final level first.
pub fn solve_streaming(
    problem: &ControlledProblem,
    grid: &LatticeGrid,
    config: &SolverConfig,
    mut sink: impl FnMut(usize, &[f64], &[u32]),
) -> Result<SolveDiagnostics, SolveError> {
    let mut ls = LevelSolver::new(problem, grid, config)?;
    let last = grid.n_levels() - 1;
    let terminal = ls.g.clone();
    sink(last, &terminal, &vec![STOP; grid.n_points()]);
    let mut next = terminal;
    let mut after: Option<Vec<f64>> = None;
    let mut diags = Vec::with_capacity(last);
    for level in (0..last).rev() {
        let sol = ls.solve_level(level, &next, after.as_deref())?;
        sink(level, &sol.values, &sol.policy);
        diags.push(sol.diagnostics);
        after = Some(std::mem::replace(&mut next, sol.values));
    }
    diags.reverse();
    Ok(SolveDiagnostics {
        epsilon: diags.iter().map(|d| d.epsilon).fold(f64::INFINITY, f64::min),
        gamma: config.gamma,
        delta_bound: diags.iter().map(|d| d.delta_bound).fold(0.0, f64::max),
        levels: diags,
    })
}

fn collect(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<SolutionField, SolveError> {
    let mut field = SolutionField::new(grid);
    let mut policy = vec![Vec::new(); grid.n_levels()];
    let diagnostics = solve_streaming(problem, grid, config, |level, values, pol| {
        field.level_mut(level).copy_from_slice(values);
        policy[level] = pol.to_vec();
    })?;
    field.policy = policy;
    field.diagnostics = diagnostics;
    Ok(field)
}

/// Solves the pure control problem.
pub fn solve(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<SolutionField, SolveError> {
    collect(problem, grid, &config.clone().with_mode(Mode::Control))
}

/// Solves the obstacle form: at every interior point either the scheme
/// holds with `u ≥ g`, or `u = g` with a negative scheme expression.
pub fn solve_stopping_vi(
    problem: &ControlledProblem,
    grid: &LatticeGrid,
    config: &SolverConfig,
) -> Result<SolutionField, SolveError> {
    collect(problem, grid, &config.clone().with_mode(Mode::StoppingVi))
}

/// Solves the control problem over `controls × r_grid`.
pub fn solve_stopping_control(
    problem: &ControlledProblem,
    grid: &LatticeGrid,
    r_grid: &[f64],
    config: &SolverConfig,
) -> Result<SolutionField, SolveError> {
    let mode = Mode::StoppingControl {
        r_grid: r_grid.to_vec(),
    };
    collect(problem, grid, &config.clone().with_mode(mode))
}

/// Dispatches on `config.mode`.
pub fn solve_mode(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<SolutionField, SolveError> {
    collect(problem, grid, config)
}

/// Solves the control problem with one fixed point over all levels at
/// once. Convergence is measured in the norm `sup |u / ξ|` with
/// `ξ(T) = 1`, `ξ(t) = ξ(t + τ_T)/γ`, in which the simultaneous map contracts
/// for `γ < 1`. Needs the whole field in memory; meant for small grids.
pub fn solve_global(problem: &ControlledProblem, grid: &LatticeGrid, config: &SolverConfig) -> Result<SolutionField, SolveError> {
    let config = config.clone().with_mode(Mode::Control);
    config.validate()?;
    if config.gamma >= 1.0 {
        return Err(SolveError::Config("the space-time fixed point needs gamma < 1".into()));
    }
    let ls = LevelSolver::new(problem, grid, &config)?;
    let levels = grid.n_levels();
    let last = levels - 1;
    let mut coeffs = Vec::with_capacity(last);
    for level in 0..last {
        coeffs.push(LevelCoefficients::build(problem, grid, &ls.controls, &ls.g, grid.time(level))?);
    }
    let inv_steps: Vec<f64> = (0..last).map(|j| grid.step(j).map(|s| 1.0 / s)).collect::<Result<_, _>>()?;
    let bound = coeffs
        .iter()
        .zip(&inv_steps)
        .map(|(c, &s)| c.epsilon_bound(s))
        .fold(f64::INFINITY, f64::min);
    let eps = if config.epsilon > 0.0 { config.epsilon.min(bound) } else { config.safety * bound };
    let gamma = config.gamma;
    let mut xi = vec![1.0; levels];
    for j in (0..last).rev() {
        xi[j] = xi[j + 1] / gamma;
    }
    // with u = ξv the map on v has weights summing to 1 − εm(ν + c), ν = (1−γ)/τ_T
    let delta = coeffs
        .iter()
        .zip(&inv_steps)
        .map(|(c, &s)| {
            let nu = (1.0 - gamma) * s;
            let mass = (0..c.n_ctl())
                .map(|e| c.m[e] * (nu + c.c_min[e]))
                .fold(f64::INFINITY, f64::min);
            1.0 - eps * mass
        })
        .fold(0.0, f64::max);

    let mut field = SolutionField::new(grid);
    for j in 0..levels {
        field.level_mut(j).copy_from_slice(&ls.g);
    }
    let n_int = grid.interior_points().len();
    let mut best = vec![vec![0.0; n_int]; last];
    let mut arg = vec![vec![0u32; n_int]; last];
    let mut iterations = 0;
    let mut observed_ratio: f64 = 0.0;
    let mut prev = f64::NAN;
    let xi_max = xi[0];
    loop {
        iterations += 1;
        for j in 0..last {
            let (cur, next) = (field.level(j), field.level(j + 1));
            coeffs[j].sweep(grid, cur, next, inv_steps[j], &mut best[j], &mut arg[j]);
        }
        let mut update: f64 = 0.0;
        for j in 0..last {
            let vals = field.level_mut(j);
            for (n, &p) in grid.interior_points().iter().enumerate() {
                let step = eps * best[j][n];
                vals[p] += step;
                update = update.max(step.abs() / xi[j]);
            }
        }
        if !update.is_finite() {
            return Err(SolveError::Divergence {
                level_time: 0.0,
                iteration: iterations,
            });
        }
        if prev > 0.0 && prev > 1e-13 {
            observed_ratio = observed_ratio.max(update / prev);
        }
        if update == 0.0 || update * delta / (1.0 - delta) * xi_max <= config.tol || update * xi_max <= 8.0 * f64::EPSILON {
            break;
        }
        if iterations >= config.max_iter {
            return Err(SolveError::Convergence {
                level_time: 0.0,
                iterations,
                last_update: update,
            });
        }
        prev = update;
    }
    field.diagnostics = SolveDiagnostics {
        epsilon: eps,
        gamma,
        delta_bound: delta,
        levels: vec![LevelDiagnostics {
            level_time: 0.0,
            iterations,
            final_update: prev,
            observed_ratio,
            epsilon: eps,
            delta_bound: delta,
            residual: f64::NAN,
        }],
    };
    Ok(field)
}

/// Location and size of the largest scheme residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub sup: f64,
    pub level: usize,
    pub point: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

/// Re-evaluates the scheme on `field` with the grid operators, independently
/// of the solver's precomputed stencils. In obstacle mode the complementarity
/// residual is reported.
pub fn residual(
    problem: &ControlledProblem,
    grid: &LatticeGrid,
    field: &SolutionField,
    mode: &Mode,
) -> Result<ResidualReport, SolveError> {
    if field.n_levels() != grid.n_levels() || field.level(0).len() != grid.n_points() {
        return Err(SolveError::Config("field dimensions do not match the grid".into()));
    }
    let controls = effective_controls(problem, mode);
    let g = grid.terminal_values(problem)?;
    let mut report = ResidualReport {
        sup: 0.0,
        level: 0,
        point: 0,
        t: 0.0,
        x: Vec::new(),
    };
    for level in 0..grid.n_levels() - 1 {
        let t = grid.time(level);
        let u = field.level(level);
        for &p in grid.interior_points() {
            let dt = delta_tau(grid, field, level, p)?;
            let x = grid.coord(p);
            let mut best = f64::NEG_INFINITY;
            for eff in &controls {
                let ctl = &problem.controls[eff.base];
                let lh = apply_lh(problem, eff.base, grid, u, t, p)?;
                let f = ctl.f.eval(t, x)?;
                let val = eff.m * (dt + lh + f + eff.r * (g[p] - u[p]));
                best = best.max(val);
            }
            let r = match mode {
                Mode::StoppingVi => complementarity(u[p] - g[p], best),
                _ => best.abs(),
            };
            if r > report.sup || report.x.is_empty() {
                report = ResidualReport {
                    sup: r.max(report.sup),
                    level,
                    point: p,
                    t,
                    x: x.to_vec(),
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Coefficient, ControlPoint, DirectionBasis};
    use approx::assert_abs_diff_eq;

    fn line_problem(controls: Vec<ControlPoint>, g: Coefficient, horizon: f64) -> ControlledProblem {
        ControlledProblem::new(DirectionBasis::axes(1), controls, g, horizon, 4.0, 0.0).unwrap()
    }

    fn ctl(label: &str, sigma: f64, c: f64, f: f64) -> ControlPoint {
        let mut p = ControlPoint::zero(label, 1);
        p.sigma = vec![sigma.into()];
        p.c = c.into();
        p.f = f.into();
        p
    }

    fn grid(p: &ControlledProblem, n: i64, h: f64, tau: f64) -> LatticeGrid {
        LatticeGrid::symmetric(&p.basis, h, tau, p.horizon, n).unwrap()
    }

    #[test]
    fn epsilon_formula() {
        // m=1, τ=0.1, h=0.5, a_{±1}=1: 1/(1/τ + 2·(2·1/h²)) = 1/26
        let p = line_problem(vec![ctl("a", 2f64.sqrt(), 0.0, 0.0)], 0.0.into(), 1.0);
        let g = grid(&p, 4, 0.5, 0.1);
        let eps = max_epsilon(&p, &g, 0.99).unwrap();
        assert_abs_diff_eq!(eps, 0.99 / 26.0, epsilon = 1e-15);

        let p0 = line_problem(vec![ctl("a", 0.0, 0.0, 0.0)], 0.0.into(), 1.0);
        let g0 = grid(&p0, 2, 0.5, 1.0);
        assert_abs_diff_eq!(max_epsilon(&p0, &g0, 0.9).unwrap(), 0.9, epsilon = 1e-15);

        // the a-term dominates, so doubling h moves ε toward 4×
        let eps_2h = max_epsilon(&p, &grid(&p, 2, 1.0, 0.1), 0.99).unwrap();
        assert_abs_diff_eq!(eps_2h, 0.99 / 14.0, epsilon = 1e-15);
        assert!(eps_2h > eps);
    }

    #[test]
    fn running_reward_gives_time_to_go() {
        let p = line_problem(vec![ctl("a", 0.0, 0.0, 1.0)], 0.0.into(), 1.0);
        let g = grid(&p, 5, 0.1, 0.1);
        let field = solve(&p, &g, &SolverConfig::default()).unwrap();
        for j in 0..g.n_levels() {
            for &q in g.interior_points() {
                assert_abs_diff_eq!(field.get(j, q), 1.0 - g.time(j), epsilon = 1e-12);
            }
        }
        let res = residual(&p, &g, &field, &Mode::Control).unwrap();
        assert!(res.sup <= 1e-9, "{res:?}");
    }

    #[test]
    fn discounted_constant_is_a_fixed_point() {
        let p = line_problem(vec![ctl("a", 0.0, 1.0, 1.0)], 1.0.into(), 1.0);
        let g = grid(&p, 3, 0.2, 0.1);
        let sol = fixed_point_level(&p, &g, 5, &vec![1.0; g.n_points()], &SolverConfig::default()).unwrap();
        assert!(sol.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn max_over_constant_rewards() {
        let two = line_problem(vec![ctl("lazy", 0.0, 0.0, 0.0), ctl("busy", 0.0, 0.0, 1.0)], 0.0.into(), 1.0);
        let one = line_problem(vec![ctl("busy", 0.0, 0.0, 1.0)], 0.0.into(), 1.0);
        let g = grid(&two, 3, 0.2, 0.1);
        let a = solve(&two, &g, &SolverConfig::default()).unwrap();
        let b = solve(&one, &g, &SolverConfig::default()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert!(a.policy[0][g.interior_points()[0]] == 1);
    }

    #[test]
    fn zero_dynamics_keep_the_terminal_reward() {
        let gfun = Coefficient::Expr(crate::expr::parse("min(abs(x1), 1) - 0.3*x1", 1).unwrap());
        let p = line_problem(vec![ctl("a", 0.0, 0.0, 0.0)], gfun, 1.0);
        let g = grid(&p, 10, 0.1, 0.25);
        let field = solve(&p, &g, &SolverConfig::default()).unwrap();
        let last = g.n_levels() - 1;
        for j in 0..g.n_levels() {
            assert_eq!(field.level(j), field.level(last));
        }
    }

    #[test]
    fn stopping_vi_examples() {
        let stop_now = line_problem(vec![ctl("a", 1.0, 0.0, -1.0)], 1.0.into(), 1.0);
        let g = grid(&stop_now, 10, 0.1, 0.05);
        let field = solve_stopping_vi(&stop_now, &g, &SolverConfig::default()).unwrap();
        assert!(field.values().iter().all(|v| *v == 1.0));
        assert_eq!(field.policy[0][g.interior_points()[3]], STOP);

        let never = line_problem(vec![ctl("a", 0.0, 0.0, 1.0)], 0.0.into(), 1.0);
        let field = solve_stopping_vi(&never, &g, &SolverConfig::default()).unwrap();
        for j in 0..g.n_levels() {
            assert_abs_diff_eq!(field.get(j, 10), 1.0 - g.time(j), epsilon = 1e-12);
        }
        let res = residual(&never, &g, &field, &Mode::StoppingVi).unwrap();
        assert!(res.sup < 1e-9);
    }

    #[test]
    fn single_zero_intensity_reproduces_control_solve() {
        let gfun = Coefficient::Expr(crate::expr::parse("cos(x1)", 1).unwrap());
        let p = line_problem(vec![ctl("a", 1.0, 0.1, 0.2)], gfun, 0.5);
        let g = grid(&p, 20, 0.1, 0.01);
        let cfg = SolverConfig::default();
        let a = solve(&p, &g, &cfg).unwrap();
        let b = solve_stopping_control(&p, &g, &[0.0], &cfg).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn config_errors() {
        let p = line_problem(vec![ctl("a", 1.0, 0.0, 0.0)], 0.0.into(), 1.0);
        let g = grid(&p, 5, 0.1, 0.1);
        let bad = SolverConfig {
            tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(matches!(solve(&p, &g, &bad), Err(SolveError::Config(_))));
        assert!(matches!(
            solve_stopping_control(&p, &g, &[1.0, 2.0], &SolverConfig::default()),
            Err(SolveError::Config(_))
        ));
        let big = SolverConfig {
            epsilon: 1.0,
            ..SolverConfig::default()
        };
        assert!(matches!(solve(&p, &g, &big), Err(SolveError::Config(_))));
        let short = SolverConfig {
            max_iter: 2,
            ..SolverConfig::default()
        };
        let gfun = Coefficient::Expr(crate::expr::parse("cos(x1)", 1).unwrap());
        let p2 = line_problem(vec![ctl("a", 1.0, 0.0, 0.0)], gfun, 1.0);
        assert!(matches!(solve(&p2, &g, &short), Err(SolveError::Convergence { .. })));
    }

    #[test]
    fn negative_drift_is_rejected() {
        let mut c = ctl("a", 1.0, 0.0, 0.0);
        c.b_plus = vec![(-1.0).into()];
        let p = line_problem(vec![c], 0.0.into(), 1.0);
        let g = grid(&p, 5, 0.1, 0.1);
        assert!(matches!(solve(&p, &g, &SolverConfig::default()), Err(SolveError::Assumption { .. })));
    }

    #[test]
    fn residual_detects_tampering() {
        // σ=1 (a_{±1}=½), c=0, m=1, h=0.1, τ=0.01: bumping u by 1 at one point
        // moves the scheme expression there by −(1/τ + 2σ²/h²) = −300
        let gfun = Coefficient::Expr(crate::expr::parse("cos(x1)", 1).unwrap());
        let p = line_problem(vec![ctl("a", 1.0, 0.0, 0.0)], gfun, 0.1);
        let g = grid(&p, 20, 0.1, 0.01);
        let mut field = solve(&p, &g, &SolverConfig::default()).unwrap();
        let clean = residual(&p, &g, &field, &Mode::Control).unwrap();
        assert!(clean.sup < 1e-9);
        let q = g.locate(&[0.0]).unwrap();
        field.level_mut(3)[q] += 1.0;
        let res = residual(&p, &g, &field, &Mode::Control).unwrap();
        assert_abs_diff_eq!(res.sup, 300.0, epsilon = 1e-6);
        assert_eq!((res.level, res.point), (3, q));
    }

    #[test]
    fn global_operator_matches_level_by_level() {
        let gfun = Coefficient::Expr(crate::expr::parse("min(abs(x1), 1)", 1).unwrap());
        let mut c2 = ctl("drift", 0.5, 0.2, 0.1);
        c2.b_plus = vec![0.5.into()];
        let p = line_problem(vec![ctl("a", 1.0, 0.0, 0.0), c2], gfun, 0.5);
        let g = grid(&p, 10, 0.2, 0.05);
        let cfg = SolverConfig {
            gamma: 0.5,
            tol: 1e-11,
            max_iter: 100_000,
            ..SolverConfig::default()
        };
        let global = solve_global(&p, &g, &cfg).unwrap();
        let levelwise = solve(&p, &g, &cfg).unwrap();
        for (a, b) in global.values().iter().zip(levelwise.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let d = &global.diagnostics;
        assert!(d.delta_bound < 1.0);
        assert!(d.levels[0].observed_ratio <= d.delta_bound + 1e-9);
    }

    #[test]
    fn observed_ratio_respects_level_bound() {
        let gfun = Coefficient::Expr(crate::expr::parse("cos(x1)", 1).unwrap());
        let p = line_problem(vec![ctl("a", 1.0, 0.3, 0.0)], gfun, 0.3);
        let g = grid(&p, 30, 0.1, 0.01);
        let field = solve(&p, &g, &SolverConfig::default()).unwrap();
        for d in &field.diagnostics.levels {
            assert!(d.observed_ratio <= d.delta_bound + 1e-12, "{d:?}");
            assert!(d.observed_ratio < 1.0);
        }
    }
}
