//! Acceptance gate: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Criteria 1–10 run in a single-threaded
//! pool, then again in a four-threaded pool for the determinism check.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nbellman::mc::{best_over_policies, randomized_stopping_check, FeedbackTable, Policy};
use nbellman::registry::{default_problem, RegistryProblem, NAMES};
use nbellman::solver::{effective_controls, solve, Mode, SolverConfig};
use nbellman::verify::{convergence_study, coupled_ladder, property_suite, Reference, SuiteConfig, SuiteReport};

const SEED: u64 = 20_261_016;
const MC_PATHS: usize = 100_000;
const MC_DT: f64 = 1e-3;

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

/// Serialized artifacts of one pass, compared across thread counts.
type Artifacts = BTreeMap<String, String>;

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn registry(name: &str) -> RegistryProblem {
    default_problem(name).expect("registry problem builds")
}

fn center_value(rp: &RegistryProblem, field: &nbellman::SolutionField, grid: &nbellman::LatticeGrid) -> f64 {
    let p = grid.locate(&vec![0.0; rp.problem.dim()]).expect("origin is a grid point");
    field.get(0, p)
}

fn exactness(art: &mut Artifacts) -> (bool, String) {
    let rp = registry("exact1d");
    let grid = rp.grid.build(&rp.problem, None).unwrap();
    let (field, dt) = timed(|| solve(&rp.problem, &grid, &SolverConfig::default()));
    let field = match field {
        Ok(f) => f,
        Err(e) => return (false, e.to_string()),
    };
    let mut err: f64 = 0.0;
    for j in 0..grid.n_levels() {
        for &p in grid.interior_points() {
            err = err.max((field.get(j, p) - (rp.problem.horizon - grid.time(j))).abs());
        }
    }
    let mut csv = Vec::new();
    field.write_csv(&grid, &mut csv).unwrap();
    art.insert("exact1d/field.csv".into(), String::from_utf8(csv).unwrap());
    art.insert("exact1d/diagnostics.json".into(), field.diagnostics.to_json());
    let passed = err <= 1e-9 && dt < Duration::from_secs(1);
    (
        passed,
        format!(
            "{} points x {} levels, sup error {err:.2e} (<= 1e-9), {:.3}s (< 1s)",
            grid.n_points(),
            grid.n_levels(),
            dt.as_secs_f64()
        ),
    )
}

fn heat_oracle(art: &mut Artifacts) -> (bool, String) {
    let rp = registry("heat1d");
    let grid = rp.grid.build(&rp.problem, None).unwrap();
    let (field, dt) = timed(|| solve(&rp.problem, &grid, &SolverConfig::default()));
    let field = match field {
        Ok(f) => f,
        Err(e) => return (false, e.to_string()),
    };
    let u = center_value(&rp, &field, &grid);
    let exact = (-1.0f64).exp();
    art.insert("heat1d/diagnostics.json".into(), field.diagnostics.to_json());
    art.insert("heat1d/u00".into(), format!("{u:e}"));
    let err = (u - exact).abs();
    (
        err <= 2e-3 && dt < Duration::from_secs(10),
        format!("u(0,0) = {u:.6}, |u - e^-1| = {err:.2e} (<= 2e-3), {:.2}s (< 10s)", dt.as_secs_f64()),
    )
}

fn rate_bound(art: &mut Artifacts) -> (bool, String) {
    let rp = registry("kink1d");
    let hs = [0.2, 0.1, 0.05, 0.025];
    let ladder = coupled_ladder(&hs);
    let (h_f, tau_f) = (hs[3] / 8.0, ladder[3].0 / 64.0);
    let probes: Vec<Vec<f64>> = [-1.0, -0.4, 0.0, 0.4, 1.0, 1.6].iter().map(|&x| vec![x]).collect();
    let (rep, dt) = timed(|| {
        convergence_study(
            &rp.problem,
            &Reference::FineGrid { h: h_f, tau: tau_f },
            &ladder,
            &probes,
            rp.grid.radius,
            &SolverConfig::default(),
        )
    });
    let mut rep = match rep {
        Ok(r) => r,
        Err(e) => return (false, e.to_string()),
    };
    let exponent = rep.fit_h.as_ref().map_or(f64::NAN, |f| f.exponent);
    let errors: Vec<String> = rep.ladder.iter().map(|r| format!("{:.2e}", r.error)).collect();
    let margins: Vec<String> = rep
        .ladder
        .iter()
        .map(|r| format!("{:.2}", r.error / rep.bound(r.tau, r.h)))
        .collect();
    let passed = rep.monotone && rep.bound_holds && exponent >= 0.5 && dt < Duration::from_secs(300);
    let detail = format!(
        "errors [{}], error/bound [{}], C = {:.3}, h-exponent {exponent:.3} (>= 0.5), {:.1}s (< 300s)",
        errors.join(", "),
        margins.join(", "),
        rep.bound_constant,
        dt.as_secs_f64()
    );
    // wall-clock time is not part of the reproducible output
    for r in &mut rep.ladder {
        r.runtime_s = 0.0;
    }
    art.insert("kink1d/rate.json".into(), rep.to_json());
    (passed, detail)
}

fn suite_check(suite: &SuiteReport, names: &[&str], problems: &[&str]) -> (bool, String) {
    let mut passed = true;
    let mut worst: Option<(&str, &str, f64)> = None;
    let mut count = 0;
    for r in &suite.results {
        if names.contains(&r.name.as_str()) && (problems.is_empty() || problems.contains(&r.problem.as_str())) {
            count += 1;
            passed &= r.passed;
            if worst.is_none_or(|w| r.margin < w.2) {
                worst = Some((&r.problem, &r.name, r.margin));
            }
        }
    }
    if count == 0 {
        return (false, "no matching suite results".into());
    }
    let (p, n, m) = worst.unwrap();
    let detail = suite
        .find(n, p)
        .map(|r| r.detail.clone())
        .unwrap_or_default();
    (passed, format!("{count} checks, tightest {p}/{n} margin {m:.3e}: {detail}"))
}

fn mc_consistency(art: &mut Artifacts) -> (bool, String) {
    let start = Instant::now();
    let mut passed = true;
    let mut detail = Vec::new();
    for name in ["heat1d", "twocontrol1d"] {
        let rp = registry(name);
        let grid = rp.grid.build(&rp.problem, None).unwrap();
        let field = match solve(&rp.problem, &grid, &SolverConfig::default()) {
            Ok(f) => f,
            Err(e) => return (false, format!("{name}: {e}")),
        };
        let fd = center_value(&rp, &field, &grid);
        let mut policies: Vec<Policy> = rp.problem.controls.iter().map(|c| Policy::constant(&c.label)).collect();
        if rp.problem.controls.len() > 1 {
            let table = FeedbackTable::new(&grid, field.policy.clone(), effective_controls(&rp.problem, &Mode::Control)).unwrap();
            policies.push(Policy::feedback("fd-feedback", table));
        }
        let (label, best, all) = match best_over_policies(&rp.problem, &policies, 0.0, &[0.0], MC_DT, MC_PATHS, SEED) {
            Ok(v) => v,
            Err(e) => return (false, format!("{name}: {e}")),
        };
        let ok = best.lower_bound() <= fd + 3.0 * best.se + 0.01;
        passed &= ok;
        detail.push(format!(
            "{name}: best '{label}' {:.5} ± {:.1e}, FD {fd:.5}",
            best.mean, best.se
        ));
        for e in &all {
            art.insert(format!("{name}/mc-{}.json", e.policy), e.to_json());
        }
    }
    let rp = registry("amerput1d");
    let levels = [0.0, 1.0, 10.0, 100.0, 1000.0];
    match randomized_stopping_check(&rp.problem, 0.0, &[0.0], rp.problem.horizon / 32.0, MC_PATHS, &levels, SEED) {
        Ok(rep) => {
            passed &= rep.gap <= 0.02;
            detail.push(format!(
                "amerput1d stopping {:.5} vs intensity {:.5}, gap {:.2e} (<= 0.02)",
                rep.stopping_value, rep.intensity_value, rep.gap
            ));
            art.insert("amerput1d/stopping-check.json".into(), rep.to_json());
        }
        Err(e) => return (false, format!("amerput1d: {e}")),
    }
    let dt = start.elapsed();
    passed &= dt < Duration::from_secs(180);
    detail.push(format!("{:.1}s (< 180s)", dt.as_secs_f64()));
    (passed, detail.join("; "))
}

/// Criteria 1–10; returns outcomes and the artifacts they produced.
fn run_all() -> (Vec<Outcome>, Artifacts) {
    let mut art = Artifacts::new();
    let mut out = Vec::new();
    let mut push = |id, title, f: &mut dyn FnMut(&mut Artifacts) -> (bool, String), art: &mut Artifacts| {
        let ((passed, detail), elapsed) = timed(|| f(art));
        out.push(Outcome {
            id,
            title,
            passed,
            detail,
            elapsed,
        });
    };
    push(1, "exactness", &mut exactness, &mut art);
    push(2, "heat oracle", &mut heat_oracle, &mut art);
    push(3, "rate bound", &mut rate_bound, &mut art);

    let problems: Vec<RegistryProblem> = NAMES.iter().map(|n| registry(n)).collect();
    let (suite, suite_time) = timed(|| property_suite(&problems, &SuiteConfig::default()));
    art.insert("suite.json".into(), suite.to_json());
    let mut from_suite = |id, title, names: &[&str], on: &[&str]| {
        let (passed, detail) = suite_check(&suite, names, on);
        out.push(Outcome {
            id,
            title,
            passed,
            detail,
            elapsed: if id == 4 { suite_time } else { Duration::ZERO },
        });
    };
    from_suite(4, "boundedness", &["boundedness"], &[]);
    from_suite(5, "comparison", &["comparison", "comparison_shift"], &["twocontrol1d"]);
    from_suite(6, "contraction", &["contraction", "residual"], &[]);
    from_suite(7, "stopping equivalence", &["stopping_equivalence", "stopping_monotone_r"], &["amerput1d"]);
    from_suite(8, "continuous dependence", &["continuous_dependence"], &["heat1d"]);
    from_suite(9, "regularity", &["lipschitz_x", "holder_t"], &["kink1d"]);

    let ((passed, detail), elapsed) = timed(|| mc_consistency(&mut art));
    out.push(Outcome {
        id: 10,
        title: "monte carlo consistency",
        passed,
        detail,
        elapsed,
    });
    (out, art)
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; a name filter that excludes us skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let (mut outcomes, first) = pool(1).install(run_all);
    let ((_, second), elapsed) = timed(|| pool(4).install(run_all));
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    outcomes.push(Outcome {
        id: 11,
        title: "determinism",
        passed: differing.is_empty() && !first.is_empty(),
        detail: if differing.is_empty() {
            format!("{} artifacts identical with 1 and 4 threads", first.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
        elapsed,
    });

    let mut failed = 0;
    for o in &outcomes {
        if !o.passed {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {:<24} {:>7.1}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.elapsed.as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
