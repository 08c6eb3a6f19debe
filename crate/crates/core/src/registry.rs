//! Shipped test problems, parameterized by numbers only.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr;
use crate::grid::{GridError, LatticeGrid};
use crate::problem::{Coefficient, ControlPoint, ControlledProblem, DirectionBasis, ProblemError};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown registry problem '{0}'; available: {}", NAMES.join(", "))]
    UnknownProblem(String),
    #[error("problem '{problem}' has no parameter '{param}'; parameters: {allowed}")]
    UnknownParameter {
        problem: String,
        param: String,
        allowed: String,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub const NAMES: &[&str] = &["exact1d", "heat1d", "kink1d", "twocontrol1d", "amerput1d", "degenerate2d"];

/// Default discretization of a registry problem: spacing, time step and
/// half-width of the index box in space units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: f64,
    pub tau: f64,
    pub radius: f64,
}

impl GridSpec {
    /// Index half-width `round(radius / h)`.
    pub fn half_width(&self) -> i64 {
        (self.radius / self.h).round() as i64
    }

    pub fn build(&self, problem: &ControlledProblem, x0: Option<&[f64]>) -> Result<LatticeGrid, GridError> {
        let n = self.half_width();
        let bx = vec![(-n, n); problem.basis.pairs()];
        let x0 = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; problem.dim()]);
        LatticeGrid::build(&problem.basis, self.h, self.tau, problem.horizon, x0, &bx)
    }
}

pub type Analytic = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct RegistryProblem {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub problem: ControlledProblem,
    pub grid: GridSpec,
    /// Closed-form value function, where one is known.
    pub analytic: Option<Analytic>,
    /// Whether the problem is meant to be solved in a stopping mode.
    pub stopping: bool,
}

impl fmt::Debug for RegistryProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryProblem")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("grid", &self.grid)
            .field("stopping", &self.stopping)
            .finish_non_exhaustive()
    }
}

fn defaults(name: &str) -> Option<Vec<(&'static str, f64)>> {
    let common = |t: f64, k: f64, h: f64, tau: f64, radius: f64| vec![("T", t), ("K", k), ("h", h), ("tau", tau), ("radius", radius)];
    let mut v = match name {
        "exact1d" => common(1.0, 2.0, 0.01, 0.01, 1.0),
        "heat1d" => common(1.0, 2.0, 0.05, 0.0025, 8.0),
        "kink1d" => common(0.5, 2.0, 0.05, 0.0025, 4.0),
        "twocontrol1d" => common(1.0, 3.0, 0.05, 0.0025, 8.0),
        "amerput1d" => common(1.0, 2.0, 0.05, 0.0025, 4.0),
        "degenerate2d" => common(0.25, 2.0, 0.05, 0.0025, 2.0),
        _ => return None,
    };
    v.extend(match name {
        "exact1d" => vec![("f", 1.0)],
        "heat1d" | "kink1d" => vec![("sigma", 1.0)],
        "twocontrol1d" => vec![
            ("sigma1", 1.0),
            ("sigma2", 0.5),
            ("drift", 0.5),
            ("c2", 0.2),
            ("f2", 0.3),
        ],
        "amerput1d" => vec![("vol", 0.3), ("rate", 0.1), ("strike", 1.0)],
        "degenerate2d" => vec![("sigma", 0.5)],
        _ => unreachable!(),
    });
    Some(v)
}

fn e(text: &str, d: usize) -> Coefficient {
    Coefficient::Expr(expr::parse(text, d).expect("registry expression parses"))
}

fn control(label: &str, sigma: f64) -> ControlPoint {
    let mut c = ControlPoint::zero(label, 1);
    c.sigma = vec![sigma.into()];
    c
}

/// Builds a registry problem with `overrides` applied to its defaults.
pub fn registry_problem(name: &str, overrides: &BTreeMap<String, f64>) -> Result<RegistryProblem, RegistryError> {
    let defs = defaults(name).ok_or_else(|| RegistryError::UnknownProblem(name.to_string()))?;
    let mut params: BTreeMap<String, f64> = defs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => {
                return Err(RegistryError::UnknownParameter {
                    problem: name.to_string(),
                    param: k.clone(),
                    allowed: defs.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", "),
                })
            }
        }
    }
    let p = |k: &str| params[k];
    let (horizon, k) = (p("T"), p("K"));
    let grid = GridSpec {
        h: p("h"),
        tau: p("tau"),
        radius: p("radius"),
    };
    let axes = DirectionBasis::axes(1);
    let mut analytic: Option<Analytic> = None;
    let mut stopping = false;
    let problem = match name {
        "exact1d" => {
            let mut c = control("idle", 0.0);
            let f = p("f");
            c.f = f.into();
            analytic = Some(Arc::new(move |t, _| f * (horizon - t)));
            ControlledProblem::new(axes, vec![c], 0.0.into(), horizon, k, 0.0)?
        }
        "heat1d" => {
            let s = p("sigma");
            // a = σ², so cos x decays at rate σ²
            analytic = Some(Arc::new(move |t, x| (-(s * s) * (horizon - t)).exp() * x[0].cos()));
            ControlledProblem::new(axes, vec![control("diffuse", s)], e("cos(x1)", 1), horizon, k, 0.0)?
        }
        "kink1d" => ControlledProblem::new(
            axes,
            vec![control("diffuse", p("sigma"))],
            e("min(abs(x1), 1)", 1),
            horizon,
            k,
            0.0,
        )?,
        "twocontrol1d" => {
            let c1 = control("diffuse", p("sigma1"));
            let mut c2 = control("drift", p("sigma2"));
            c2.b_plus = vec![p("drift").into()];
            c2.c = p("c2").into();
            c2.f = e(&format!("{:?}*cos(x1)", p("f2")), 1);
            ControlledProblem::new(axes, vec![c1, c2], e("cos(x1)", 1), horizon, k, 0.0)?
        }
        "amerput1d" => {
            // log-price dynamics dx = (ρ − v²/2)dt + v dW, discount ρ
            let (vol, rate) = (p("vol"), p("rate"));
            let mut c = control("hold", vol / 2f64.sqrt());
            let mu = rate - 0.5 * vol * vol;
            if mu >= 0.0 {
                c.b_plus = vec![mu.into()];
            } else {
                c.b_minus = vec![(-mu).into()];
            }
            c.c = rate.into();
            stopping = true;
            let g = e(&format!("max(0, {:?} - exp(x1))", p("strike")), 1);
            ControlledProblem::new(axes, vec![c], g, horizon, k, 0.0)?
        }
        "degenerate2d" => {
            let s = p("sigma");
            let basis = DirectionBasis::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]])?;
            let mut c = ControlPoint::zero("diffuse", 2);
            c.sigma = vec![0.0.into(), s.into()];
            // a = σ²ℓℓᵀ with ℓ = (1, 1): the generator maps cos(x1 + x2) to −4σ² cos(x1 + x2)
            analytic = Some(Arc::new(move |t, x| (-4.0 * s * s * (horizon - t)).exp() * (x[0] + x[1]).cos()));
            ControlledProblem::new(basis, vec![c], e("cos(x1 + x2)", 2), horizon, k, 0.0)?
        }
        _ => unreachable!("defaults cover every name"),
    };
    Ok(RegistryProblem {
        name: name.to_string(),
        params,
        problem,
        grid,
        analytic,
        stopping,
    })
}

/// Registry problem with its default parameters.
pub fn default_problem(name: &str) -> Result<RegistryProblem, RegistryError> {
    registry_problem(name, &BTreeMap::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{validate_problem, SamplingPlan};

    #[test]
    fn all_entries_build_and_validate() {
        for name in NAMES {
            let rp = default_problem(name).unwrap();
            let plan = SamplingPlan::uniform(&rp.problem, rp.grid.radius, 9, 3);
            let rep = validate_problem(&rp.problem, &plan);
            assert!(rep.passed, "{name}: {:?}", rep.violations);
            assert!(rp.grid.half_width() > 2);
        }
    }

    #[test]
    fn overrides() {
        let mut o = BTreeMap::new();
        o.insert("sigma".to_string(), 2.0);
        let rp = registry_problem("heat1d", &o).unwrap();
        let a = rp.analytic.unwrap();
        assert!((a(0.0, &[0.0]) - (-4.0f64).exp()).abs() < 1e-15);
        o.insert("nope".to_string(), 1.0);
        assert!(matches!(
            registry_problem("heat1d", &o),
            Err(RegistryError::UnknownParameter { .. })
        ));
        assert!(matches!(default_problem("nope"), Err(RegistryError::UnknownProblem(_))));
    }

    #[test]
    fn put_drift_sign() {
        let rp = default_problem("amerput1d").unwrap();
        let c = &rp.problem.controls[0];
        // ρ − v²/2 = 0.1 − 0.045 > 0
        assert!((c.b_plus[0].eval(0.0, &[0.0]).unwrap() - 0.055).abs() < 1e-15);
        assert!(rp.stopping);
    }
}
