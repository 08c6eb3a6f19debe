//! Controlled-diffusion problems in lattice-decomposed form.
//!
//! A problem is a finite list of controls. Each control carries, for every
//! direction pair `±ℓ_k`, a diffusion coefficient `σ_k` (shared by both
//! signs) and a one-sided drift `b_k ≥ 0` per sign, plus the discount `c`,
//! running reward `f` and the normalizing factor `m`. The continuous operator
//! being discretized is `Σ a_ij ∂_ij + Σ β_i ∂_i − c` with
//! `a = Σ_{±k} ½σ_k² ℓ_k ℓ_kᵀ` and `β = Σ_{±k} b_k ℓ_k`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError};

type CoefficientFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// A coefficient evaluator `(t, x) -> value`.
#[derive(Clone)]
pub enum Coefficient {
    Const(f64),
    Expr(Expr),
    Func(Arc<CoefficientFn>),
}

impl Coefficient {
    pub fn func(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Func(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Coefficient::Const(v) => Ok(*v),
            Coefficient::Expr(e) => e.eval(t, x),
            Coefficient::Func(f) => Ok(f(t, x)),
        }
    }

    /// Whether the value is known not to depend on `(t, x)`.
    pub fn is_constant(&self) -> bool {
        match self {
            Coefficient::Const(_) => true,
            Coefficient::Expr(e) => e.is_constant(),
            Coefficient::Func(_) => false,
        }
    }

    /// `self + delta`, keeping the representation where possible.
    pub fn shifted(&self, delta: f64) -> Coefficient {
        match self {
            Coefficient::Const(v) => Coefficient::Const(v + delta),
            Coefficient::Expr(e) => Coefficient::Expr(Expr::Bin(
                crate::expr::BinOp::Add,
                Box::new(e.clone()),
                Box::new(Expr::Num(delta)),
            )),
            Coefficient::Func(f) => {
                let f = f.clone();
                Coefficient::func(move |t, x| f(t, x) + delta)
            }
        }
    }

    /// Conservative: closures are assumed to depend on time.
    pub fn depends_on_time(&self) -> bool {
        match self {
            Coefficient::Const(_) => false,
            Coefficient::Expr(e) => e.uses_time(),
            Coefficient::Func(_) => true,
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Const(v) => write!(f, "Const({v})"),
            Coefficient::Expr(e) => write!(f, "Expr({e})"),
            Coefficient::Func(_) => f.write_str("Func(..)"),
        }
    }
}

impl From<f64> for Coefficient {
    fn from(v: f64) -> Self {
        Coefficient::Const(v)
    }
}

/// Signed direction index `±k`, `k` one-based in the public API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dir {
    /// Zero-based pair index.
    pub pair: usize,
    pub positive: bool,
}

impl Dir {
    pub fn plus(pair: usize) -> Self {
        Dir { pair, positive: true }
    }

    pub fn minus(pair: usize) -> Self {
        Dir { pair, positive: false }
    }

    pub fn flip(self) -> Self {
        Dir {
            pair: self.pair,
            positive: !self.positive,
        }
    }

    /// Signed one-based index, e.g. `-2` for `Dir::minus(1)`.
    pub fn signed(self) -> i64 {
        let k = self.pair as i64 + 1;
        if self.positive {
            k
        } else {
            -k
        }
    }

    /// All `2·d1` signed directions: `+1..+d1` then `-1..-d1`.
    pub fn all(d1: usize) -> impl Iterator<Item = Dir> {
        (0..d1).map(Dir::plus).chain((0..d1).map(Dir::minus))
    }

    /// Position of this direction in the order of [`Dir::all`].
    pub fn slot(self, d1: usize) -> usize {
        if self.positive {
            self.pair
        } else {
            d1 + self.pair
        }
    }
}

impl fmt::Display for Dir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.signed())
    }
}

/// The lattice directions `ℓ_{±1}, …, ℓ_{±d1}` with `ℓ_{-k} = -ℓ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBasis {
    d: usize,
    ell: Vec<Vec<f64>>,
}

impl DirectionBasis {
    /// `ell[k]` is `ℓ_{k+1}`; the negative directions are derived.
    pub fn new(ell: Vec<Vec<f64>>) -> Result<Self, ProblemError> {
        let d = ell.first().map(Vec::len).ok_or_else(|| {
            ProblemError::Structure("at least one direction pair is required".into())
        })?;
        if d == 0 {
            return Err(ProblemError::Structure("directions must have dimension ≥ 1".into()));
        }
        if let Some(k) = ell.iter().position(|v| v.len() != d) {
            return Err(ProblemError::Structure(format!(
                "direction {} has length {}, expected {d}",
                k + 1,
                ell[k].len()
            )));
        }
        if ell.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ProblemError::Structure("direction components must be finite".into()));
        }
        if let Some(k) = ell.iter().position(|v| v.iter().all(|c| *c == 0.0)) {
            return Err(ProblemError::Structure(format!("direction {} is zero", k + 1)));
        }
        Ok(DirectionBasis { d, ell })
    }

    /// Unit vectors `±e_1, …, ±e_d`.
    pub fn axes(d: usize) -> Self {
        let ell = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        DirectionBasis { d, ell }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pairs(&self) -> usize {
        self.ell.len()
    }

    /// `ℓ_{+k}` for pair `k` (zero-based).
    pub fn positive(&self, pair: usize) -> &[f64] {
        &self.ell[pair]
    }

    /// `ℓ_dir`, negated exactly for negative directions.
    pub fn vector(&self, dir: Dir) -> Vec<f64> {
        let v = &self.ell[dir.pair];
        if dir.positive {
            v.clone()
        } else {
            v.iter().map(|c| -c).collect()
        }
    }

    pub fn norm(&self, pair: usize) -> f64 {
        self.ell[pair].iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// One element of the discretized control set.
#[derive(Debug, Clone)]
pub struct ControlPoint {
    pub label: String,
    /// `σ_k = σ_{-k}`, one entry per direction pair.
    pub sigma: Vec<Coefficient>,
    /// `b_{+k}` per pair.
    pub b_plus: Vec<Coefficient>,
    /// `b_{-k}` per pair.
    pub b_minus: Vec<Coefficient>,
    pub c: Coefficient,
    pub f: Coefficient,
    /// Normalizing factor, constant per control.
    pub m: f64,
}

impl ControlPoint {
    /// A control with zero coefficients for `d1` direction pairs.
    pub fn zero(label: impl Into<String>, d1: usize) -> Self {
        ControlPoint {
            label: label.into(),
            sigma: vec![Coefficient::Const(0.0); d1],
            b_plus: vec![Coefficient::Const(0.0); d1],
            b_minus: vec![Coefficient::Const(0.0); d1],
            c: Coefficient::Const(0.0),
            f: Coefficient::Const(0.0),
            m: 1.0,
        }
    }

    pub fn b(&self, dir: Dir) -> &Coefficient {
        if dir.positive {
            &self.b_plus[dir.pair]
        } else {
            &self.b_minus[dir.pair]
        }
    }

    /// `a_k = ½σ_k²`, identical for both signs.
    pub fn a(&self, pair: usize, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        let s = self.sigma[pair].eval(t, x)?;
        Ok(0.5 * s * s)
    }

    pub fn coefficients(&self) -> impl Iterator<Item = &Coefficient> {
        self.sigma
            .iter()
            .chain(&self.b_plus)
            .chain(&self.b_minus)
            .chain([&self.c, &self.f])
    }

    /// True when every coefficient is independent of `(t, x)`.
    pub fn is_constant(&self) -> bool {
        self.coefficients().all(Coefficient::is_constant)
    }
}

/// The full problem datum.
#[derive(Debug, Clone)]
pub struct ControlledProblem {
    pub basis: DirectionBasis,
    pub controls: Vec<ControlPoint>,
    /// Terminal reward `g(x)`; the time argument is ignored.
    pub g: Coefficient,
    pub horizon: f64,
    /// Structural constant `K ≥ 1`.
    pub k: f64,
    pub lambda: f64,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem structure: {0}")]
    Structure(String),
    #[error("unknown control label '{0}'")]
    UnknownControl(String),
    #[error("in {field}: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed problem document: {0}")]
    Json(#[from] serde_json::Error),
}

impl ControlledProblem {
    pub fn new(
        basis: DirectionBasis,
        controls: Vec<ControlPoint>,
        g: Coefficient,
        horizon: f64,
        k: f64,
        lambda: f64,
    ) -> Result<Self, ProblemError> {
        let p = ControlledProblem {
            basis,
            controls,
            g,
            horizon,
            k,
            lambda,
        };
        p.check_structure()?;
        Ok(p)
    }

    fn check_structure(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::Structure(m));
        if self.controls.is_empty() {
            return bad("control list is empty".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon T must be positive, got {}", self.horizon));
        }
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return bad(format!("K must be at least 1, got {}", self.k));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        let d1 = self.basis.pairs();
        for c in &self.controls {
            if c.sigma.len() != d1 || c.b_plus.len() != d1 || c.b_minus.len() != d1 {
                return bad(format!(
                    "control '{}' must give sigma and b for each of the {d1} direction pairs",
                    c.label
                ));
            }
            if !(c.m > 0.0 && c.m.is_finite()) {
                return bad(format!("control '{}' has non-positive normalizer m = {}", c.label, c.m));
            }
        }
        for (i, c) in self.controls.iter().enumerate() {
            if self.controls[..i].iter().any(|o| o.label == c.label) {
                return bad(format!("duplicate control label '{}'", c.label));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn control_index(&self, label: &str) -> Result<usize, ProblemError> {
        self.controls
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| ProblemError::UnknownControl(label.to_string()))
    }

    /// Evaluates the terminal reward.
    pub fn terminal(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.g.eval(self.horizon, x)
    }

    /// Effective diffusion matrix and drift of the continuous operator.
    pub fn reconstruct_continuous_coefficients(
        &self,
        label: &str,
        t: f64,
        x: &[f64],
    ) -> Result<(DMatrix<f64>, DVector<f64>), ProblemError> {
        let idx = self.control_index(label)?;
        Ok(self.continuous_coefficients(idx, t, x)?)
    }

    pub(crate) fn continuous_coefficients(
        &self,
        idx: usize,
        t: f64,
        x: &[f64],
    ) -> Result<(DMatrix<f64>, DVector<f64>), EvalError> {
        let d = self.dim();
        let ctl = &self.controls[idx];
        let mut a = DMatrix::zeros(d, d);
        let mut beta = DVector::zeros(d);
        for pair in 0..self.basis.pairs() {
            let l = self.basis.positive(pair);
            // both signs contribute a_k ℓℓᵀ, and (−ℓ)(−ℓ)ᵀ = ℓℓᵀ
            let ak = ctl.a(pair, t, x)?;
            let bp = ctl.b_plus[pair].eval(t, x)?;
            let bm = ctl.b_minus[pair].eval(t, x)?;
            for i in 0..d {
                beta[i] += (bp - bm) * l[i];
                for j in 0..d {
                    a[(i, j)] += 2.0 * ak * l[i] * l[j];
                }
            }
        }
        Ok((a, beta))
    }
}

/// Sample points for assumption checks.
#[derive(Debug, Clone, Default)]
pub struct SamplingPlan {
    /// `(t, x)` points for pointwise bounds.
    pub points: Vec<(f64, Vec<f64>)>,
    /// `(t, x, y)` triples for Lipschitz difference quotients in `x`.
    pub pairs: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

impl SamplingPlan {
    /// A tensor mesh over `[-radius, radius]^d × [0, T)`, with each point
    /// paired with its neighbor one mesh step along every axis.
    pub fn uniform(problem: &ControlledProblem, radius: f64, per_axis: usize, n_times: usize) -> Self {
        let d = problem.dim();
        let per_axis = per_axis.max(2);
        let n_times = n_times.max(1);
        let step = 2.0 * radius / (per_axis - 1) as f64;
        let coord = |i: usize| -radius + step * i as f64;
        let mut plan = SamplingPlan::default();
        let total = per_axis.pow(d as u32);
        for tj in 0..n_times {
            let t = problem.horizon * tj as f64 / n_times as f64;
            for flat in 0..total {
                let mut rest = flat;
                let idx: Vec<usize> = (0..d)
                    .map(|_| {
                        let i = rest % per_axis;
                        rest /= per_axis;
                        i
                    })
                    .collect();
                let x: Vec<f64> = idx.iter().map(|&i| coord(i)).collect();
                // one lattice neighbor and one close neighbor per axis, so
                // both the coarse and the local slope are probed
                for axis in 0..d {
                    if idx[axis] + 1 < per_axis {
                        let mut y = x.clone();
                        y[axis] = coord(idx[axis] + 1);
                        plan.pairs.push((t, x.clone(), y));
                        let mut z = x.clone();
                        z[axis] += step / 16.0;
                        plan.pairs.push((t, x.clone(), z));
                    }
                }
                plan.points.push((t, x));
            }
        }
        plan
    }
}

/// Which structural condition a sample violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumption {
    /// An evaluator returned a non-finite value or a domain error.
    FiniteEval,
    /// `b_k ≥ 0`, needed for a monotone scheme.
    DriftNonnegative,
    /// `m(1 + c) ≥ 1/K`.
    Normalization,
    /// `|σ_k| + b_k + m|f| + mc + |g| ≤ K`.
    CoefficientBound,
    /// `c ≥ λ`.
    DiscountLowerBound,
    /// Lipschitz continuity in `x` with constant `K`.
    LipschitzX,
    /// `|ℓ_k| ≤ K`.
    DirectionBound,
}

impl Assumption {
    pub fn id(self) -> &'static str {
        match self {
            Assumption::FiniteEval => "finite-eval",
            Assumption::DriftNonnegative => "b_k >= 0",
            Assumption::Normalization => "m(1+c) >= 1/K",
            Assumption::CoefficientBound => "coefficient-bound",
            Assumption::DiscountLowerBound => "c >= lambda",
            Assumption::LipschitzX => "lipschitz-x",
            Assumption::DirectionBound => "|l_k| <= K",
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub assumption: Assumption,
    /// Empty for problem-level conditions (`g`, directions).
    pub control: String,
    pub t: f64,
    pub x: Vec<f64>,
    pub measured: f64,
    pub required: f64,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.assumption)?;
        if !self.control.is_empty() {
            write!(f, " control '{}'", self.control)?;
        }
        write!(
            f,
            " at t={} x={:?}: {} (measured {}, bound {})",
            self.t, self.x, self.detail, self.measured, self.required
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

/// Checks the structural assumptions of the scheme at every sample.
pub fn validate_problem(problem: &ControlledProblem, samples: &SamplingPlan) -> ValidationReport {
    let mut out = Vec::new();
    let k = problem.k;
    let d1 = problem.basis.pairs();
    let mut push = |assumption, control: &str, t: f64, x: &[f64], measured: f64, required: f64, detail: String| {
        out.push(Violation {
            assumption,
            control: control.to_string(),
            t,
            x: x.to_vec(),
            measured,
            required,
            detail,
        })
    };

    for pair in 0..d1 {
        let n = problem.basis.norm(pair);
        if n > k {
            push(Assumption::DirectionBound, "", 0.0, &[], n, k, format!("|l_{}|", pair + 1));
        }
    }

    // Evaluates, turning errors and non-finite values into violations.
    fn get(
        c: &Coefficient,
        t: f64,
        x: &[f64],
        what: &str,
        label: &str,
        out: &mut Vec<Violation>,
    ) -> Option<f64> {
        let (measured, detail) = match c.eval(t, x) {
            Ok(v) if v.is_finite() => return Some(v),
            Ok(v) => (v, format!("{what} is not finite")),
            Err(e) => (f64::NAN, format!("{what}: {e}")),
        };
        out.push(Violation {
            assumption: Assumption::FiniteEval,
            control: label.to_string(),
            t,
            x: x.to_vec(),
            measured,
            required: f64::INFINITY,
            detail,
        });
        None
    }

    struct Sample {
        sigma: Vec<f64>,
        b: Vec<f64>,
        c: f64,
        f: f64,
    }

    let sample = |ctl: &ControlPoint, t: f64, x: &[f64], out: &mut Vec<Violation>| -> Option<Sample> {
        let mut ok = true;
        let mut sigma = Vec::with_capacity(d1);
        let mut b = Vec::with_capacity(2 * d1);
        for pair in 0..d1 {
            let s = get(&ctl.sigma[pair], t, x, &format!("sigma_{}", pair + 1), &ctl.label, out);
            ok &= s.is_some();
            sigma.push(s.unwrap_or(0.0));
        }
        for dir in Dir::all(d1) {
            let v = get(ctl.b(dir), t, x, &format!("b_{dir}"), &ctl.label, out);
            ok &= v.is_some();
            b.push(v.unwrap_or(0.0));
        }
        let c = get(&ctl.c, t, x, "c", &ctl.label, out);
        let f = get(&ctl.f, t, x, "f", &ctl.label, out);
        match (ok, c, f) {
            (true, Some(c), Some(f)) => Some(Sample { sigma, b, c, f }),
            _ => None,
        }
    };

    let mut local = Vec::new();
    for (t, x) in &samples.points {
        let (t, x) = (*t, x.as_slice());
        let g = get(&problem.g, problem.horizon, x, "g", "", &mut local);
        if let Some(g) = g {
            if g.abs() > k {
                push(Assumption::CoefficientBound, "", t, x, g.abs(), k, "|g|".into());
            }
        }
        for ctl in &problem.controls {
            let Some(s) = sample(ctl, t, x, &mut local) else {
                continue;
            };
            let m = ctl.m;
            for dir in Dir::all(d1) {
                let b = s.b[dir.slot(d1)];
                if b < 0.0 {
                    push(Assumption::DriftNonnegative, &ctl.label, t, x, b, 0.0, format!("b_{dir}"));
                }
            }
            let norm = m * (1.0 + s.c);
            if norm < 1.0 / k {
                push(Assumption::Normalization, &ctl.label, t, x, norm, 1.0 / k, "m(1+c)".into());
            }
            if s.c < problem.lambda {
                push(Assumption::DiscountLowerBound, &ctl.label, t, x, s.c, problem.lambda, "c".into());
            }
            let g_abs = g.map_or(0.0, f64::abs);
            for dir in Dir::all(d1) {
                let total = s.sigma[dir.pair].abs() + s.b[dir.slot(d1)] + m * s.f.abs() + m * s.c + g_abs;
                if total > k {
                    push(
                        Assumption::CoefficientBound,
                        &ctl.label,
                        t,
                        x,
                        total,
                        k,
                        format!("|sigma_{dir}| + b_{dir} + m|f| + mc + |g|"),
                    );
                }
            }
        }
    }

    for (t, x, y) in &samples.pairs {
        let (t, x, y) = (*t, x.as_slice(), y.as_slice());
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let gx = get(&problem.g, problem.horizon, x, "g", "", &mut local);
        let gy = get(&problem.g, problem.horizon, y, "g", "", &mut local);
        let dg = match (gx, gy) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => continue,
        };
        for ctl in &problem.controls {
            let (Some(sx), Some(sy)) = (sample(ctl, t, x, &mut local), sample(ctl, t, y, &mut local)) else {
                continue;
            };
            let common = (sx.c - sy.c).abs() + ctl.m * (sx.f - sy.f).abs() + dg;
            for dir in Dir::all(d1) {
                let s = dir.slot(d1);
                let diff = (sx.sigma[dir.pair] - sy.sigma[dir.pair]).abs() + (sx.b[s] - sy.b[s]).abs() + common;
                let q = diff / dist;
                if q > k {
                    push(
                        Assumption::LipschitzX,
                        &ctl.label,
                        t,
                        x,
                        q,
                        k,
                        format!("difference quotient along direction {dir} toward {y:?}"),
                    );
                }
            }
        }
    }

    // Non-finite evaluations are reported once per distinct sample.
    local.dedup();
    out.extend(local);
    ValidationReport {
        passed: out.is_empty(),
        violations: out,
    }
}

/// A coefficient in a problem document: a number or an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSrc {
    Num(f64),
    Text(String),
}

impl CoefficientSrc {
    fn compile(&self, d: usize, field: &str) -> Result<Coefficient, ProblemError> {
        match self {
            CoefficientSrc::Num(v) => Ok(Coefficient::Const(*v)),
            CoefficientSrc::Text(s) => expr::parse(s, d)
                .map(Coefficient::Expr)
                .map_err(|source| ProblemError::Parse {
                    field: field.to_string(),
                    source,
                }),
        }
    }
}

impl From<&str> for CoefficientSrc {
    fn from(s: &str) -> Self {
        CoefficientSrc::Text(s.to_string())
    }
}

impl From<f64> for CoefficientSrc {
    fn from(v: f64) -> Self {
        CoefficientSrc::Num(v)
    }
}

/// JSON form of one control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// One entry per direction pair.
    pub sigma: Vec<CoefficientSrc>,
    /// `[b_{+k}, b_{-k}]` per direction pair.
    pub b: Vec<[CoefficientSrc; 2]>,
    pub c: CoefficientSrc,
    pub f: CoefficientSrc,
    pub m: f64,
}

/// JSON problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDoc {
    pub d: usize,
    pub d1: usize,
    pub ell: Vec<Vec<f64>>,
    pub controls: Vec<ControlDoc>,
    pub g: CoefficientSrc,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(default)]
    pub lambda: f64,
}

impl ProblemDoc {
    pub fn from_json(text: &str) -> Result<Self, ProblemError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn compile(&self) -> Result<ControlledProblem, ProblemError> {
        let d = self.d;
        if self.ell.len() != self.d1 {
            return Err(ProblemError::Structure(format!(
                "d1 = {} but {} direction vectors given",
                self.d1,
                self.ell.len()
            )));
        }
        if self.ell.iter().any(|v| v.len() != d) {
            return Err(ProblemError::Structure(format!("every direction must have {d} components")));
        }
        let basis = DirectionBasis::new(self.ell.clone())?;
        let mut controls = Vec::with_capacity(self.controls.len());
        for (i, c) in self.controls.iter().enumerate() {
            let label = c.label.clone().unwrap_or_else(|| format!("control{}", i + 1));
            if c.sigma.len() != self.d1 || c.b.len() != self.d1 {
                return Err(ProblemError::Structure(format!(
                    "control '{label}' must give sigma and b for each of the {} direction pairs",
                    self.d1
                )));
            }
            let field = |name: String| format!("controls[{i}].{name}");
            let mut sigma = Vec::new();
            let mut b_plus = Vec::new();
            let mut b_minus = Vec::new();
            for k in 0..self.d1 {
                sigma.push(c.sigma[k].compile(d, &field(format!("sigma[{k}]")))?);
                b_plus.push(c.b[k][0].compile(d, &field(format!("b[{k}][0]")))?);
                b_minus.push(c.b[k][1].compile(d, &field(format!("b[{k}][1]")))?);
            }
            controls.push(ControlPoint {
                label,
                sigma,
                b_plus,
                b_minus,
                c: c.c.compile(d, &field("c".into()))?,
                f: c.f.compile(d, &field("f".into()))?,
                m: c.m,
            });
        }
        let g = self.g.compile(d, "g")?;
        ControlledProblem::new(basis, controls, g, self.horizon, self.k, self.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn one_d(sigma: f64, bp: f64, bm: f64, c: f64, f: f64, m: f64, k: f64) -> ControlledProblem {
        let ctl = ControlPoint {
            label: "a".into(),
            sigma: vec![sigma.into()],
            b_plus: vec![bp.into()],
            b_minus: vec![bm.into()],
            c: c.into(),
            f: f.into(),
            m,
        };
        ControlledProblem::new(DirectionBasis::axes(1), vec![ctl], 0.0.into(), 1.0, k, 0.0).unwrap()
    }

    fn plan(p: &ControlledProblem) -> SamplingPlan {
        SamplingPlan::uniform(p, 2.0, 9, 3)
    }

    #[test]
    fn constants_pass() {
        let p = one_d(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0);
        let r = validate_problem(&p, &plan(&p));
        assert!(r.passed, "{:?}", r.violations);
    }

    #[test]
    fn small_normalizer_violates() {
        let p = one_d(1.0, 0.0, 0.0, 0.0, 0.0, 0.1, 2.0);
        let r = validate_problem(&p, &plan(&p));
        assert!(!r.passed);
        let v = &r.violations[0];
        assert_eq!(v.assumption, Assumption::Normalization);
        assert_abs_diff_eq!(v.measured, 0.1);
        assert_abs_diff_eq!(v.required, 0.5);
    }

    #[test]
    fn negative_drift_is_reported() {
        let mut p = one_d(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 4.0);
        p.controls[0].b_plus[0] = Coefficient::Expr(expr::parse("x1", 1).unwrap());
        let samples = SamplingPlan {
            points: vec![(0.0, vec![-1.0])],
            pairs: vec![],
        };
        let r = validate_problem(&p, &samples);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].assumption, Assumption::DriftNonnegative);
        assert_eq!(r.violations[0].measured, -1.0);
    }

    #[test]
    fn non_finite_evaluation_is_a_violation() {
        let mut p = one_d(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 4.0);
        p.controls[0].f = Coefficient::Expr(expr::parse("1/x1", 1).unwrap());
        let samples = SamplingPlan {
            points: vec![(0.0, vec![0.0]), (0.0, vec![1.0])],
            pairs: vec![],
        };
        let r = validate_problem(&p, &samples);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].assumption, Assumption::FiniteEval);
        assert_eq!(r.violations[0].assumption.id(), "finite-eval");
    }

    #[test]
    fn lipschitz_and_bounds() {
        let mut p = one_d(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0);
        p.g = Coefficient::Expr(expr::parse("min(3*abs(x1), 1)", 1).unwrap());
        let r = validate_problem(&p, &plan(&p));
        assert!(r.violations.iter().any(|v| v.assumption == Assumption::LipschitzX));
        let p = one_d(1.5, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0);
        let r = validate_problem(&p, &plan(&p));
        assert!(r.violations.iter().any(|v| v.assumption == Assumption::CoefficientBound));
    }

    #[test]
    fn validation_is_deterministic() {
        let mut p = one_d(1.0, 0.5, 0.0, 0.0, 0.0, 0.2, 2.0);
        p.g = Coefficient::Expr(expr::parse("3*x1", 1).unwrap());
        let s = plan(&p);
        assert_eq!(validate_problem(&p, &s), validate_problem(&p, &s));
    }

    #[test]
    fn reconstruct_one_dimensional() {
        let p = one_d(2f64.sqrt(), 0.0, 0.0, 0.0, 0.0, 1.0, 4.0);
        let (a, beta) = p.reconstruct_continuous_coefficients("a", 0.0, &[0.0]).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(beta[0], 0.0);
        let p = one_d(0.0, 3.0, 1.0, 0.0, 0.0, 1.0, 4.0);
        let (_, beta) = p.reconstruct_continuous_coefficients("a", 0.0, &[0.0]).unwrap();
        assert_eq!(beta[0], 2.0);
        assert!(matches!(
            p.reconstruct_continuous_coefficients("nope", 0.0, &[0.0]),
            Err(ProblemError::UnknownControl(_))
        ));
    }

    #[test]
    fn reconstruct_sheared_pair() {
        // Σ_{±1} ½ e1e1ᵀ + Σ_{±2} ½ (e1+e2)(e1+e2)ᵀ = [[1,0],[0,0]] + [[1,1],[1,1]]
        let basis = DirectionBasis::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let mut ctl = ControlPoint::zero("a", 2);
        ctl.sigma = vec![1.0.into(), 1.0.into()];
        let p = ControlledProblem::new(basis, vec![ctl], 0.0.into(), 1.0, 4.0, 0.0).unwrap();
        let (a, _) = p.reconstruct_continuous_coefficients("a", 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn reconstructed_diffusion_is_psd() {
        let basis = DirectionBasis::new(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let mut ctl = ControlPoint::zero("a", 3);
        ctl.sigma = vec![
            Coefficient::Expr(expr::parse("cos(x1)", 2).unwrap()),
            Coefficient::Expr(expr::parse("0.5*sin(x2 + t)", 2).unwrap()),
            0.3.into(),
        ];
        let p = ControlledProblem::new(basis, vec![ctl], 0.0.into(), 1.0, 4.0, 0.0).unwrap();
        let plan = SamplingPlan::uniform(&p, 2.0, 5, 2);
        assert!(validate_problem(&p, &plan).passed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (t, x) in &plan.points {
            let (a, _) = p.reconstruct_continuous_coefficients("a", *t, x).unwrap();
            for _ in 0..100 {
                let z = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                assert!((z.transpose() * &a * &z)[(0, 0)] >= -1e-14);
            }
        }
    }

    #[test]
    fn json_document() {
        let text = r#"{
            "d": 1, "d1": 1, "ell": [[1.0]],
            "controls": [{"label": "run", "sigma": ["1"], "b": [[0, "0.5"]], "c": 0, "f": "cos(x1)", "m": 1}],
            "g": "max(0, 1 - abs(x1))", "T": 1.0, "K": 2.0, "lambda": 0.0
        }"#;
        let doc = ProblemDoc::from_json(text).unwrap();
        let p = doc.compile().unwrap();
        assert_eq!(p.controls[0].label, "run");
        assert_eq!(p.controls[0].b_minus[0].eval(0.0, &[0.0]).unwrap(), 0.5);
        assert_eq!(p.terminal(&[0.25]).unwrap(), 0.75);

        let bad = text.replace("cos(x1)", "cos(x1");
        let err = ProblemDoc::from_json(&bad).unwrap().compile().unwrap_err();
        match err {
            ProblemError::Parse { field, source } => {
                assert_eq!(field, "controls[0].f");
                assert_eq!(source.position(), Some(6));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(ProblemDoc::from_json(&text.replace("\"K\"", "\"Kx\"")).is_err());
    }
}
