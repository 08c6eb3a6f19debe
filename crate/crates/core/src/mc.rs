//! Monte Carlo estimates of the controlled payoff, used as an oracle that
//! shares nothing with the finite-difference scheme except the problem datum.
//!
//! Paths follow Euler–Maruyama steps `x ← x + β dt + σ̂ √dt ξ` with
//! `σ̂σ̂ᵀ = 2a`. Each path has its own ChaCha stream keyed by `(seed, path)`,
//! so estimates do not depend on how paths are spread over threads, and
//! different policies see the same noise.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::grid::{LatticeGrid, STOP};
use crate::problem::{ControlledProblem, ProblemError};
use crate::solver::EffectiveControl;

/// Paths per statistics chunk; chunks are merged in index order.
const CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum McError {
    #[error("Monte Carlo configuration: {0}")]
    Config(String),
    #[error("diffusion matrix of control '{control}' is not positive semidefinite at t={t} x={x:?} (eigenvalue {eigenvalue:e})")]
    NonPsd {
        control: String,
        t: f64,
        x: Vec<f64>,
        eigenvalue: f64,
    },
    #[error("path {path} produced a non-finite value at t={t}")]
    NonFinite { path: usize, t: f64 },
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type StopRegion = Arc<dyn Fn(f64, &[f64]) -> bool + Send + Sync>;
type Intensity = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Nearest-cell lookup of a solver policy.
#[derive(Debug, Clone)]
pub struct FeedbackTable {
    grid: LatticeGrid,
    policy: Vec<Vec<u32>>,
    controls: Vec<EffectiveControl>,
    inverse: DMatrix<f64>,
}

impl FeedbackTable {
    /// `policy[level][point]` indexes `controls` (or is [`STOP`]), as produced
    /// by the solver for the same grid.
    pub fn new(grid: &LatticeGrid, policy: Vec<Vec<u32>>, controls: Vec<EffectiveControl>) -> Result<Self, McError> {
        let d = grid.dim();
        let d1 = grid.basis().pairs();
        if d != d1 {
            return Err(McError::Policy(format!(
                "feedback tables need as many direction pairs as dimensions ({d1} vs {d})"
            )));
        }
        let ell = DMatrix::from_fn(d, d1, |i, k| grid.basis().positive(k)[i]);
        let inverse = ell
            .try_inverse()
            .ok_or_else(|| McError::Policy("direction matrix is singular".into()))?;
        if policy.len() != grid.n_levels() || policy.iter().any(|l| l.len() != grid.n_points()) {
            return Err(McError::Policy("policy table does not match the grid".into()));
        }
        let n = controls.len() as u32;
        if policy.iter().flatten().any(|&a| a != STOP && a >= n) {
            return Err(McError::Policy("policy references an unknown control".into()));
        }
        Ok(FeedbackTable {
            grid: grid.clone(),
            policy,
            controls,
            inverse,
        })
    }

    /// Control at `(t, x)`, or `None` where the table says stop. Points
    /// outside the interior use the nearest interior cell.
    pub fn lookup(&self, t: f64, x: &[f64]) -> Option<EffectiveControl> {
        let g = &self.grid;
        let times = g.times();
        let last = times.len() - 1;
        let slack = 1e-9 * g.tau();
        let level = times.partition_point(|&s| s <= t + slack).saturating_sub(1).min(last.saturating_sub(1));
        let d = g.dim();
        let x0 = g.x0();
        let idx: Vec<i64> = g
            .index_box()
            .iter()
            .enumerate()
            .map(|(k, &(lo, hi))| {
                let c: f64 = (0..d).map(|i| self.inverse[(k, i)] * (x[i] - x0[i])).sum();
                let i = (c / g.h()).round() as i64;
                if hi - lo >= 2 {
                    i.clamp(lo + 1, hi - 1)
                } else {
                    i.clamp(lo, hi)
                }
            })
            .collect();
        let p = g.flat_index(&idx)?;
        match self.policy[level][p] {
            STOP => None,
            a => Some(self.controls[a as usize]),
        }
    }
}

#[derive(Clone)]
pub enum ControlRule {
    Constant(String),
    Feedback(Arc<FeedbackTable>),
}

#[derive(Clone, Default)]
pub enum StopRule {
    #[default]
    None,
    /// Stop at the first simulation time the region is hit.
    Region(StopRegion),
    /// Randomized stopping with intensity `r(t, x) ≥ 0`.
    Intensity(Intensity),
}

#[derive(Clone)]
pub struct Policy {
    pub name: String,
    pub control: ControlRule,
    pub stop: StopRule,
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Policy").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Policy {
    pub fn constant(label: impl Into<String>) -> Self {
        let label = label.into();
        Policy {
            name: label.clone(),
            control: ControlRule::Constant(label),
            stop: StopRule::None,
        }
    }

    pub fn feedback(name: impl Into<String>, table: FeedbackTable) -> Self {
        Policy {
            name: name.into(),
            control: ControlRule::Feedback(Arc::new(table)),
            stop: StopRule::None,
        }
    }

    pub fn with_stop_region(mut self, region: impl Fn(f64, &[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.stop = StopRule::Region(Arc::new(region));
        self
    }

    pub fn with_intensity(mut self, r: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.stop = StopRule::Intensity(Arc::new(r));
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub policy: String,
}

impl McEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }

    /// Statistical lower bound `mean − 3·SE`.
    pub fn lower_bound(&self) -> f64 {
        self.mean - 3.0 * self.se
    }
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Stats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Stats) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * (o.n as f64 / n as f64);
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64 / n as f64);
        self.n = n;
    }

    fn se(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2.max(0.0) / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Runs `per_path` over all paths in fixed chunks, returning one set of
/// statistics per output slot, merged in path order.
fn accumulate(
    n_paths: usize,
    slots: usize,
    per_path: impl Fn(usize, &mut Vec<f64>) -> Result<(), McError> + Sync,
) -> Result<Vec<Stats>, McError> {
    let n_chunks = n_paths.div_ceil(CHUNK);
    let chunks: Vec<Result<Vec<Stats>, McError>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut stats = vec![Stats::default(); slots];
            let mut out = Vec::with_capacity(slots);
            for path in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                out.clear();
                per_path(path, &mut out)?;
                for (s, &v) in stats.iter_mut().zip(out.iter()) {
                    s.push(v);
                }
            }
            Ok(stats)
        })
        .collect();
    let mut total = vec![Stats::default(); slots];
    for chunk in chunks {
        for (t, s) in total.iter_mut().zip(chunk?.iter()) {
            t.merge(s);
        }
    }
    Ok(total)
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Local coefficients of one control at one point.
struct Local {
    beta: Vec<f64>,
    /// Row-major `d × d` square root of `2a`.
    root: Vec<f64>,
    c: f64,
    f: f64,
}

/// Euler–Maruyama stepping for one problem.
struct Stepper<'a> {
    problem: &'a ControlledProblem,
    d: usize,
    /// Coefficients of controls that do not depend on `(t, x)`.
    cached: Vec<Option<Local>>,
}

impl<'a> Stepper<'a> {
    fn new(problem: &'a ControlledProblem) -> Result<Self, McError> {
        let mut s = Stepper {
            problem,
            d: problem.dim(),
            cached: Vec::new(),
        };
        let origin = vec![0.0; s.d];
        let cached = (0..problem.controls.len())
            .map(|i| {
                if problem.controls[i].is_constant() {
                    s.compute(i, 0.0, &origin).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>, McError>>()?;
        s.cached = cached;
        Ok(s)
    }

    fn compute(&self, idx: usize, t: f64, x: &[f64]) -> Result<Local, McError> {
        let ctl = &self.problem.controls[idx];
        let (a, beta) = self.problem.continuous_coefficients(idx, t, x)?;
        let d = self.d;
        let root = if d == 1 {
            let two_a = 2.0 * a[(0, 0)];
            if two_a < -1e-12 {
                return Err(McError::NonPsd {
                    control: ctl.label.clone(),
                    t,
                    x: x.to_vec(),
                    eigenvalue: two_a,
                });
            }
            vec![two_a.max(0.0).sqrt()]
        } else {
            let two_a = a * 2.0;
            let scale = two_a.amax().max(1.0);
            let eig = SymmetricEigen::new(two_a);
            let mut lam = eig.eigenvalues.clone();
            for l in lam.iter_mut() {
                if *l < -1e-12 * scale {
                    return Err(McError::NonPsd {
                        control: ctl.label.clone(),
                        t,
                        x: x.to_vec(),
                        eigenvalue: *l,
                    });
                }
                *l = l.max(0.0).sqrt();
            }
            let q = &eig.eigenvectors;
            let r = q * DMatrix::from_diagonal(&lam) * q.transpose();
            (0..d * d).map(|k| r[(k / d, k % d)]).collect()
        };
        Ok(Local {
            beta: beta.iter().copied().collect(),
            root,
            c: ctl.c.eval(t, x)?,
            f: ctl.f.eval(t, x)?,
        })
    }

    fn local<'s>(&'s self, idx: usize, t: f64, x: &[f64], scratch: &'s mut Option<Local>) -> Result<&'s Local, McError> {
        if let Some(l) = &self.cached[idx] {
            return Ok(l);
        }
        *scratch = Some(self.compute(idx, t, x)?);
        Ok(scratch.as_ref().expect("just set"))
    }

    fn advance(&self, local: &Local, x: &mut [f64], dt: f64, rng: &mut ChaCha8Rng, xi: &mut [f64]) {
        let sq = dt.sqrt();
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let d = self.d;
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += local.root[i * d + j] * xi[j];
            }
            x[i] += local.beta[i] * dt + sq * noise;
        }
    }
}

/// Simulation times `s = t_0 < … < t_N = T`, the last step possibly short.
fn time_steps(problem: &ControlledProblem, s: f64, dt: f64) -> Result<Vec<f64>, McError> {
    let span = problem.horizon - s;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(McError::Config(format!("dt must be positive, got {dt}")));
    }
    if !(span > 0.0) || !s.is_finite() {
        return Err(McError::Config(format!("start time {s} must lie before T = {}", problem.horizon)));
    }
    let n = ((span / dt) * (1.0 - 1e-10)).ceil().max(1.0) as usize;
    let mut t: Vec<f64> = (0..n).map(|k| s + k as f64 * dt).collect();
    t.push(problem.horizon);
    Ok(t)
}

/// Reward collected over one step of length `dt` with intensity `r`:
/// `∫_0^dt e^{−ru} du`, exact for a frozen intensity.
fn intensity_weight(r: f64, dt: f64) -> f64 {
    if r == 0.0 {
        dt
    } else {
        -(-r * dt).exp_m1() / r
    }
}

fn check_inputs(problem: &ControlledProblem, x: &[f64], n_paths: usize) -> Result<(), McError> {
    if n_paths == 0 {
        return Err(McError::Config("number of paths must be positive".into()));
    }
    if x.len() != problem.dim() {
        return Err(McError::Config(format!(
            "start point has {} coordinates, problem dimension is {}",
            x.len(),
            problem.dim()
        )));
    }
    Ok(())
}

fn resolve(problem: &ControlledProblem, policy: &Policy) -> Result<Option<usize>, McError> {
    match &policy.control {
        ControlRule::Constant(label) => Ok(Some(problem.control_index(label)?)),
        ControlRule::Feedback(_) => Ok(None),
    }
}

fn run_path(
    stepper: &Stepper,
    policy: &Policy,
    fixed: Option<usize>,
    times: &[f64],
    x0: &[f64],
    seed: u64,
    path: usize,
) -> Result<f64, McError> {
    let problem = stepper.problem;
    let mut rng = path_rng(seed, path);
    let mut x = x0.to_vec();
    let mut xi = vec![0.0; stepper.d];
    let mut scratch = None;
    let mut log_weight: f64 = 0.0; // −φ − ∫r
    let mut payoff = 0.0;
    let n = times.len() - 1;
    for k in 0..n {
        let t = times[k];
        let dt = times[k + 1] - t;
        let (idx, r_extra) = match &policy.control {
            ControlRule::Constant(_) => (fixed.expect("resolved"), 0.0),
            ControlRule::Feedback(table) => match table.lookup(t, &x) {
                Some(e) => (e.base, e.r),
                None => {
                    payoff += log_weight.exp() * problem.terminal(&x)?;
                    return finite(payoff, path, t);
                }
            },
        };
        let r = match &policy.stop {
            StopRule::None => r_extra,
            StopRule::Region(region) => {
                if region(t, &x) {
                    payoff += log_weight.exp() * problem.terminal(&x)?;
                    return finite(payoff, path, t);
                }
                r_extra
            }
            StopRule::Intensity(rate) => {
                let r = rate(t, &x);
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(McError::Policy(format!("intensity {r} at t={t} x={x:?}")));
                }
                r + r_extra
            }
        };
        let local = stepper.local(idx, t, &x, &mut scratch)?;
        let rate = if r > 0.0 { local.f + r * problem.terminal(&x)? } else { local.f };
        payoff += log_weight.exp() * rate * intensity_weight(r, dt);
        log_weight -= (local.c + r) * dt;
        stepper.advance(local, &mut x, dt, &mut rng, &mut xi);
        if !payoff.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(McError::NonFinite { path, t });
        }
    }
    payoff += log_weight.exp() * problem.terminal(&x)?;
    finite(payoff, path, problem.horizon)
}

fn finite(v: f64, path: usize, t: f64) -> Result<f64, McError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(McError::NonFinite { path, t })
    }
}

/// Mean and standard error of the discounted payoff of `policy` started at `(s, x)`.
pub fn simulate_payoff(
    problem: &ControlledProblem,
    policy: &Policy,
    s: f64,
    x: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate, McError> {
    check_inputs(problem, x, n_paths)?;
    let times = time_steps(problem, s, dt)?;
    let stepper = Stepper::new(problem)?;
    let fixed = resolve(problem, policy)?;
    let stats = accumulate(n_paths, 1, |path, out| {
        out.push(run_path(&stepper, policy, fixed, &times, x, seed, path)?);
        Ok(())
    })?;
    Ok(McEstimate {
        mean: stats[0].mean,
        se: stats[0].se(),
        paths: n_paths,
        dt,
        seed,
        policy: policy.name.clone(),
    })
}

/// Evaluates every policy on the same paths and returns the best one.
/// The result is an estimate of a lower bound on the value function.
pub fn best_over_policies(
    problem: &ControlledProblem,
    policies: &[Policy],
    s: f64,
    x: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(String, McEstimate, Vec<McEstimate>), McError> {
    if policies.is_empty() {
        return Err(McError::Config("policy list is empty".into()));
    }
    let all = policies
        .iter()
        .map(|p| simulate_payoff(problem, p, s, x, dt, n_paths, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, e) in all.iter().enumerate() {
        if e.mean > all[best].mean {
            best = i;
        }
    }
    Ok((all[best].policy.clone(), all[best].clone(), all))
}

/// Best value of one intensity level over threshold rules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityLevel {
    pub r: f64,
    pub mean: f64,
    pub se: f64,
    pub rule: String,
}

/// Comparison of grid-time stopping rules with randomized stopping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppingCheckReport {
    pub stopping_value: f64,
    pub stopping_se: f64,
    pub stopping_rule: String,
    pub intensity_value: f64,
    pub intensity_se: f64,
    pub intensity_rule: String,
    pub gap: f64,
    pub per_level: Vec<IntensityLevel>,
    pub thresholds: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub note: String,
}

impl StoppingCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const PILOT_PATHS: usize = 256;
const N_THRESHOLDS: usize = 41;
pub const MAX_CHECK_STEPS: usize = 32;

/// Recorded path under the single control: per step the state's reward
/// `g`, running reward `f`, discount rate `c` and step length.
struct Recorded {
    g: Vec<f64>,
    f: Vec<f64>,
    c: Vec<f64>,
}

fn record(stepper: &Stepper, times: &[f64], x0: &[f64], seed: u64, stream: u64, rec: &mut Recorded) -> Result<(), McError> {
    let problem = stepper.problem;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut x = x0.to_vec();
    let mut xi = vec![0.0; stepper.d];
    let mut scratch = None;
    rec.g.clear();
    rec.f.clear();
    rec.c.clear();
    let n = times.len() - 1;
    for k in 0..n {
        let t = times[k];
        let local = stepper.local(0, t, &x, &mut scratch)?;
        rec.g.push(problem.terminal(&x)?);
        rec.f.push(local.f);
        rec.c.push(local.c);
        stepper.advance(local, &mut x, times[k + 1] - t, &mut rng, &mut xi);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(McError::NonFinite { path: stream as usize, t });
        }
    }
    rec.g.push(problem.terminal(&x)?);
    Ok(())
}

/// Payoff of stopping at step `stop` (`N` means at the horizon).
fn stopped_payoff(rec: &Recorded, dts: &[f64], stop: usize) -> f64 {
    let mut lw: f64 = 0.0;
    let mut v = 0.0;
    for k in 0..stop {
        v += lw.exp() * rec.f[k] * dts[k];
        lw -= rec.c[k] * dts[k];
    }
    v + lw.exp() * rec.g[stop]
}

/// Randomized-stopping payoff with intensity `r·1{g ≥ θ}`.
fn intensity_payoff(rec: &Recorded, dts: &[f64], r: f64, theta: f64) -> f64 {
    let mut lw: f64 = 0.0;
    let mut v = 0.0;
    for k in 0..dts.len() {
        let rk = if rec.g[k] >= theta { r } else { 0.0 };
        v += lw.exp() * (rec.f[k] + rk * rec.g[k]) * intensity_weight(rk, dts[k]);
        lw -= (rec.c[k] + rk) * dts[k];
    }
    v + lw.exp() * rec.g[dts.len()]
}

/// Compares (a) the best grid-time stopping rule among threshold rules
/// `stop when g(x) ≥ θ` and deterministic stopping times with (b) the best
/// randomized-stopping policy among intensities `r·1{g(x) ≥ θ}` with `r`
/// from `r_levels`. Both families are evaluated on the same paths.
pub fn randomized_stopping_check(
    problem: &ControlledProblem,
    s: f64,
    x: &[f64],
    dt: f64,
    n_paths: usize,
    r_levels: &[f64],
    seed: u64,
) -> Result<StoppingCheckReport, McError> {
    check_inputs(problem, x, n_paths)?;
    if problem.dim() != 1 || problem.controls.len() != 1 {
        return Err(McError::Config("the stopping check needs a one-dimensional single-control problem".into()));
    }
    if r_levels.is_empty() || r_levels.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(McError::Config(format!("intensity levels must be finite and nonnegative, got {r_levels:?}")));
    }
    let times = time_steps(problem, s, dt)?;
    let n = times.len() - 1;
    if n > MAX_CHECK_STEPS {
        return Err(McError::Config(format!(
            "the stopping check sweeps stopping times and allows at most {MAX_CHECK_STEPS} steps, got {n}"
        )));
    }
    let dts: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let stepper = Stepper::new(problem)?;

    // threshold range from pilot paths on streams disjoint from the main ones
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut rec = Recorded {
        g: Vec::new(),
        f: Vec::new(),
        c: Vec::new(),
    };
    for i in 0..PILOT_PATHS {
        record(&stepper, &times, x, seed, u64::MAX - i as u64, &mut rec)?;
        for &g in &rec.g {
            lo = lo.min(g);
            hi = hi.max(g);
        }
    }
    let thresholds: Vec<f64> = if hi > lo {
        (0..N_THRESHOLDS)
            .map(|j| lo + (hi - lo) * j as f64 / (N_THRESHOLDS - 1) as f64)
            .collect()
    } else {
        vec![lo]
    };

    // slots: thresholds, deterministic times 0..=N, then per r: constant and thresholds
    let n_stop = thresholds.len() + n + 1;
    let per_r = 1 + thresholds.len();
    let slots = n_stop + r_levels.len() * per_r;
    let stats = accumulate(n_paths, slots, |path, out| {
        let mut rec = Recorded {
            g: Vec::with_capacity(n + 1),
            f: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
        };
        record(&stepper, &times, x, seed, path as u64, &mut rec)?;
        for &th in &thresholds {
            let stop = rec.g.iter().position(|&g| g >= th).unwrap_or(n);
            out.push(stopped_payoff(&rec, &dts, stop));
        }
        for k in 0..=n {
            out.push(stopped_payoff(&rec, &dts, k));
        }
        for &r in r_levels {
            out.push(intensity_payoff(&rec, &dts, r, f64::NEG_INFINITY));
            for &th in &thresholds {
                out.push(intensity_payoff(&rec, &dts, r, th));
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(McError::NonFinite { path, t: s });
        }
        Ok(())
    })?;

    let stop_name = |i: usize| {
        if i < thresholds.len() {
            format!("stop when g >= {}", thresholds[i])
        } else {
            format!("stop at t = {}", times[i - thresholds.len()])
        }
    };
    let mut best_stop = 0;
    for i in 0..n_stop {
        if stats[i].mean > stats[best_stop].mean {
            best_stop = i;
        }
    }
    let mut per_level = Vec::with_capacity(r_levels.len());
    let (mut best_int, mut best_int_name) = (n_stop, String::new());
    for (ri, &r) in r_levels.iter().enumerate() {
        let base = n_stop + ri * per_r;
        let mut best = base;
        for i in base..base + per_r {
            if stats[i].mean > stats[best].mean {
                best = i;
            }
        }
        let rule = if best == base {
            format!("intensity {r}")
        } else {
            format!("intensity {r} where g >= {}", thresholds[best - base - 1])
        };
        if per_level.is_empty() || stats[best].mean > stats[best_int].mean {
            best_int = best;
            best_int_name = rule.clone();
        }
        per_level.push(IntensityLevel {
            r,
            mean: stats[best].mean,
            se: stats[best].se(),
            rule,
        });
    }
    let a = &stats[best_stop];
    let b = &stats[best_int];
    Ok(StoppingCheckReport {
        stopping_value: a.mean,
        stopping_se: a.se(),
        stopping_rule: stop_name(best_stop),
        intensity_value: b.mean,
        intensity_se: b.se(),
        intensity_rule: best_int_name,
        gap: (a.mean - b.mean).abs(),
        per_level,
        thresholds,
        paths: n_paths,
        dt,
        seed,
        note: "stopping times restricted to simulation times and threshold rules; intensities restricted to \
               r·1{g >= θ} with finite total intensity"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Coefficient, ControlPoint, DirectionBasis};
    use approx::assert_abs_diff_eq;

    fn one_d(sigma: f64, b: f64, c: f64, f: f64, g: Coefficient, horizon: f64) -> ControlledProblem {
        let mut p = ControlPoint::zero("a", 1);
        p.sigma = vec![sigma.into()];
        p.b_plus = vec![b.into()];
        p.c = c.into();
        p.f = f.into();
        ControlledProblem::new(DirectionBasis::axes(1), vec![p], g, horizon, 4.0, 0.0).unwrap()
    }

    fn expr(s: &str) -> Coefficient {
        Coefficient::Expr(crate::expr::parse(s, 1).unwrap())
    }

    #[test]
    fn deterministic_integrands_have_zero_error() {
        let p = one_d(0.0, 0.0, 0.0, 1.0, 0.0.into(), 2.0);
        let e = simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.0], 0.01, 1000, 1).unwrap();
        assert_abs_diff_eq!(e.mean, 2.0, epsilon = 1e-12);
        assert_eq!(e.se, 0.0);

        let p = one_d(0.0, 0.0, 1.0, 0.0, 1.0.into(), 1.0);
        let e = simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.0], 1e-3, 100, 1).unwrap();
        // left-endpoint discount with constant c is exact
        assert_abs_diff_eq!(e.mean, (-1.0f64).exp(), epsilon = 1e-12);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn heat_estimate() {
        let p = one_d(1.0, 0.0, 0.0, 0.0, expr("cos(x1)"), 1.0);
        let e = simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.0], 1e-2, 20_000, 7).unwrap();
        let exact = (-1.0f64).exp();
        assert!((e.mean - exact).abs() <= 3.0 * e.se + 5e-3, "{e:?}");
    }

    #[test]
    fn seeds_reproduce_and_threads_do_not_matter() {
        let p = one_d(1.0, 0.3, 0.1, 0.2, expr("cos(x1)"), 0.5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.1], 0.01, 3000, 42).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(3));
        let other = simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.1], 0.01, 3000, 43).unwrap();
        assert_ne!(a.mean, other.mean);
    }

    #[test]
    fn best_picks_larger_running_reward() {
        let mut c1 = ControlPoint::zero("zero", 1);
        c1.sigma = vec![1.0.into()];
        let mut c2 = c1.clone();
        c2.label = "one".into();
        c2.f = 1.0.into();
        let p = ControlledProblem::new(DirectionBasis::axes(1), vec![c1, c2], expr("cos(x1)"), 1.0, 4.0, 0.0).unwrap();
        let pols = [Policy::constant("zero"), Policy::constant("one")];
        let (label, best, all) = best_over_policies(&p, &pols, 0.0, &[0.0], 0.01, 500, 3).unwrap();
        assert_eq!(label, "one");
        // common random numbers: the difference is exactly the reward
        assert_abs_diff_eq!(best.mean - all[0].mean, 1.0, epsilon = 1e-9);
        let single = simulate_payoff(&p, &pols[0], 0.0, &[0.0], 0.01, 500, 3).unwrap();
        assert_eq!(
            best_over_policies(&p, &pols[..1], 0.0, &[0.0], 0.01, 500, 3).unwrap().1,
            single
        );
    }

    #[test]
    fn discount_monotonicity() {
        let g = expr("1 + cos(x1)");
        let low = one_d(1.0, 0.0, 0.1, 0.5, g.clone(), 1.0);
        let high = one_d(1.0, 0.0, 0.6, 0.5, g, 1.0);
        let a = simulate_payoff(&low, &Policy::constant("a"), 0.0, &[0.0], 0.02, 2000, 5).unwrap();
        let b = simulate_payoff(&high, &Policy::constant("a"), 0.0, &[0.0], 0.02, 2000, 5).unwrap();
        assert!(b.mean <= a.mean);
    }

    #[test]
    fn intensity_and_region_rules() {
        // f = −1, g = 1: stopping at once is optimal
        let p = one_d(1.0, 0.0, 0.0, -1.0, 1.0.into(), 1.0);
        let now = Policy::constant("a").with_stop_region(|_, _| true);
        let e = simulate_payoff(&p, &now, 0.0, &[0.0], 0.05, 200, 1).unwrap();
        assert_eq!((e.mean, e.se), (1.0, 0.0));
        // constant intensity r: 1 − (1 − e^{−rT})/r exactly
        let r = 10.0;
        let e = simulate_payoff(&p, &Policy::constant("a").with_intensity(move |_, _| r), 0.0, &[0.0], 0.05, 10, 1).unwrap();
        assert_abs_diff_eq!(e.mean, 1.0 - (1.0 - (-r).exp()) / r, epsilon = 1e-12);
        let bad = Policy::constant("a").with_intensity(|_, _| -1.0);
        assert!(matches!(simulate_payoff(&p, &bad, 0.0, &[0.0], 0.05, 10, 1), Err(McError::Policy(_))));
    }

    #[test]
    fn stopping_check_examples() {
        let p = one_d(1.0, 0.0, 0.0, -1.0, 1.0.into(), 1.0);
        let levels = [0.0, 1.0, 10.0, 100.0, 1000.0];
        let rep = randomized_stopping_check(&p, 0.0, &[0.0], 1.0 / 16.0, 1000, &levels, 9).unwrap();
        assert_abs_diff_eq!(rep.stopping_value, 1.0, epsilon = 1e-12);
        assert!(rep.gap <= 3.0 * rep.stopping_se.max(rep.intensity_se) + 1.0 / 1000.0 + 1e-12, "{rep:?}");
        let gaps: Vec<f64> = rep.per_level.iter().map(|l| rep.stopping_value - l.mean).collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));

        let p = one_d(1.0, 0.0, 0.0, 1.0, 0.0.into(), 0.5);
        let rep = randomized_stopping_check(&p, 0.0, &[0.0], 1.0 / 32.0, 500, &levels, 9).unwrap();
        assert_abs_diff_eq!(rep.stopping_value, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.intensity_value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn stopping_check_matches_region_policy() {
        let p = one_d(1.0, 0.0, 0.0, 0.0, expr("max(0, 1 - abs(x1))"), 0.5);
        let rep = randomized_stopping_check(&p, 0.0, &[0.2], 1.0 / 16.0, 2000, &[0.0, 1000.0], 4).unwrap();
        let dt = 1.0 / 16.0;
        // the same rule through the generic simulator, on the same streams
        let th = rep.thresholds[30];
        let g = p.g.clone();
        let pol = Policy::constant("a").with_stop_region(move |_, x| g.eval(0.0, x).unwrap() >= th);
        let e = simulate_payoff(&p, &pol, 0.0, &[0.2], dt, 2000, 4).unwrap();
        assert!(e.mean <= rep.stopping_value + 1e-12);
        assert!(rep.gap <= 0.02, "{rep:?}");
    }

    #[test]
    fn check_rejects_long_horizons_and_bad_inputs() {
        let p = one_d(1.0, 0.0, 0.0, 0.0, 0.0.into(), 1.0);
        assert!(randomized_stopping_check(&p, 0.0, &[0.0], 0.01, 10, &[1.0], 1).is_err());
        assert!(simulate_payoff(&p, &Policy::constant("a"), 0.0, &[0.0], 0.01, 0, 1).is_err());
        assert!(simulate_payoff(&p, &Policy::constant("zz"), 0.0, &[0.0], 0.01, 1, 1).is_err());
    }

    #[test]
    fn two_dimensional_root() {
        let basis = DirectionBasis::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let mut c = ControlPoint::zero("a", 2);
        c.sigma = vec![0.0.into(), 1.0.into()];
        let p = ControlledProblem::new(basis, vec![c], 0.0.into(), 1.0, 4.0, 0.0).unwrap();
        let st = Stepper::new(&p).unwrap();
        let l = st.cached[0].as_ref().unwrap();
        // σ̂σ̂ᵀ = 2a = 2·ℓℓᵀ with ℓ = (1, 1)
        let r = DMatrix::from_row_slice(2, 2, &l.root);
        let rr = &r * r.transpose();
        for (v, e) in rr.iter().zip([2.0, 2.0, 2.0, 2.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }
}
