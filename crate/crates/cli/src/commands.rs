use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nbellman::mc::{self, FeedbackTable, Policy};
use nbellman::problem::{validate_problem, SamplingPlan};
use nbellman::registry::{self, RegistryProblem};
use nbellman::solver::{self, effective_controls, Mode};
use nbellman::verify::{self, Reference, SuiteConfig};
use nbellman::LatticeGrid;
use serde_json::json;

use crate::config::{self, ReferenceConfig, Resolved, RunConfig};
use crate::error::{io_error, CliError};

/// Settings shared by every subcommand after merging flags and config.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub tol: Option<f64>,
    pub mode: Option<config::ModeName>,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        Ok((path, BufWriter::new(file)))
    }

    fn resolve(&self) -> Result<Resolved, CliError> {
        config::resolve_problem(&self.config)
    }
}

fn validate(ctx: &Context, r: &Resolved) -> Result<(), CliError> {
    let v = &ctx.config.validation;
    let plan = SamplingPlan::uniform(&r.problem, r.grid.radius, v.per_axis, v.times);
    let report = validate_problem(&r.problem, &plan);
    if report.passed {
        return Ok(());
    }
    let shown: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
    let more = report.violations.len().saturating_sub(shown.len());
    let mut msg = shown.join("\n  ");
    if more > 0 {
        msg.push_str(&format!("\n  ... and {more} more"));
    }
    Err(CliError::validation(msg))
}

/// Nearest lattice point to `x`.
fn nearest(grid: &LatticeGrid, x: &[f64]) -> usize {
    let dist = |p: usize| grid.coord(p).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..grid.n_points())
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .expect("grid has points")
}

fn probes(ctx: &Context, r: &Resolved) -> Result<Vec<Vec<f64>>, CliError> {
    let probes = if ctx.config.probes.is_empty() {
        vec![r.x0.clone()]
    } else {
        ctx.config.probes.clone()
    };
    if let Some(p) = probes.iter().find(|p| p.len() != r.problem.dim()) {
        return Err(CliError::config(format!("probe {p:?} does not have {} components", r.problem.dim())));
    }
    Ok(probes)
}

fn fmt_point(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
    format!("({})", parts.join(", "))
}

pub fn solve(ctx: &Context) -> Result<(), CliError> {
    let r = ctx.resolve()?;
    validate(ctx, &r)?;
    let sc = config::solver_config(&ctx.config, &r, ctx.mode, ctx.tol)?;
    let grid = r.build_grid()?;
    let probes = probes(ctx, &r)?;
    ctx.prepare_out()?;
    let field = solver::solve_mode(&r.problem, &grid, &sc)?;

    let (csv_path, mut w) = ctx.create("field.csv")?;
    field.write_csv(&grid, &mut w).map_err(|e| io_error(&csv_path, e))?;
    w.flush().map_err(|e| io_error(&csv_path, e))?;
    let (bin_path, mut w) = ctx.create("field.bfd")?;
    field.write_binary(&grid, &mut w).map_err(|e| io_error(&bin_path, e))?;
    w.flush().map_err(|e| io_error(&bin_path, e))?;
    ctx.write_text("diagnostics.json", &field.diagnostics.to_json())?;

    let mut rows = Vec::new();
    for x in &probes {
        let p = nearest(&grid, x);
        let u = field.get(0, p);
        println!("u(0, {}) = {u:.12}", fmt_point(grid.coord(p)));
        rows.push(json!({"x": x, "grid_x": grid.coord(p), "t": grid.time(0), "u": u}));
    }
    let summary = json!({
        "problem": r.name,
        "mode": sc.mode,
        "h": grid.h(),
        "tau": grid.tau(),
        "points": grid.n_points(),
        "levels": grid.n_levels(),
        "probes": rows,
    });
    ctx.write_text("probes.json", &pretty(&summary))?;
    println!("wrote {}", ctx.out.display());
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

pub fn converge(ctx: &Context) -> Result<(), CliError> {
    let r = ctx.resolve()?;
    validate(ctx, &r)?;
    let sc = config::solver_config(&ctx.config, &r, ctx.mode, ctx.tol)?;
    let cc = ctx.config.converge.clone().unwrap_or_default();
    let ladder = match (&cc.ladder, &cc.hs) {
        (Some(l), _) => l.clone(),
        (None, Some(hs)) => verify::coupled_ladder(hs),
        (None, None) => {
            let h = r.grid.h;
            verify::coupled_ladder(&[4.0 * h, 2.0 * h, h])
        }
    };
    let reference = match (&cc.reference, &r.analytic) {
        (Some(ReferenceConfig::FineGrid { h, tau }), _) => Reference::FineGrid { h: *h, tau: *tau },
        (Some(ReferenceConfig::Analytic) | None, Some(a)) => Reference::Analytic(a.clone()),
        (Some(ReferenceConfig::Analytic), None) => {
            return Err(CliError::config(format!("problem '{}' has no analytic solution", r.name)))
        }
        (None, None) => {
            let &(tau, h) = ladder.last().ok_or_else(|| CliError::config("empty ladder"))?;
            Reference::FineGrid { h: h / 4.0, tau: tau / 16.0 }
        }
    };
    let probes = probes(ctx, &r)?;
    ctx.prepare_out()?;
    let mut report = verify::convergence_study(&r.problem, &reference, &ladder, &probes, r.grid.radius, &sc)?;
    println!("{:>12} {:>12} {:>14}", "tau", "h", "error");
    for rung in &report.ladder {
        println!("{:>12.4e} {:>12.4e} {:>14.6e}", rung.tau, rung.h, rung.error);
    }
    if let Some(f) = &report.fit_h {
        println!("fitted exponent in h:   {:.3} (r^2 {:.3})", f.exponent, f.r_squared);
    }
    if let Some(f) = &report.fit_tau {
        println!("fitted exponent in tau: {:.3} (r^2 {:.3})", f.exponent, f.r_squared);
    }
    println!("bound constant C = {:.4e}, bound holds: {}", report.bound_constant, report.bound_holds);
    // timings go to the terminal only, so repeated runs write identical files
    for rung in &mut report.ladder {
        rung.runtime_s = 0.0;
    }
    let (csv_path, mut w) = ctx.create("rate.csv")?;
    report.write_csv(&mut w).map_err(|e| io_error(&csv_path, e))?;
    w.flush().map_err(|e| io_error(&csv_path, e))?;
    ctx.write_text("rate.json", &report.to_json())?;
    Ok(())
}

pub fn monte_carlo(ctx: &Context) -> Result<(), CliError> {
    let r = ctx.resolve()?;
    let mc_cfg = ctx
        .config
        .mc
        .clone()
        .ok_or_else(|| CliError::config("the mc command needs an \"mc\" section"))?;
    if mc_cfg.paths == 0 {
        return Err(CliError::config("mc.paths must be at least 1"));
    }
    if !(mc_cfg.dt > 0.0 && mc_cfg.dt.is_finite()) {
        return Err(CliError::config(format!("mc.dt must be positive, got {}", mc_cfg.dt)));
    }
    validate(ctx, &r)?;
    let x = mc_cfg.x.clone().unwrap_or_else(|| r.x0.clone());
    let labels = mc_cfg
        .policies
        .clone()
        .unwrap_or_else(|| r.problem.controls.iter().map(|c| c.label.clone()).collect());
    let mut policies = Vec::new();
    for label in &labels {
        r.problem.control_index(label)?;
        policies.push(Policy::constant(label));
    }
    let mut fd_value = None;
    if mc_cfg.feedback {
        let sc = config::solver_config(&ctx.config, &r, Some(config::ModeName::Control), ctx.tol)?;
        let grid = r.build_grid()?;
        let field = solver::solve(&r.problem, &grid, &sc)?;
        fd_value = Some(field.get(0, nearest(&grid, &x)));
        let table = FeedbackTable::new(&grid, field.policy.clone(), effective_controls(&r.problem, &Mode::Control))?;
        policies.push(Policy::feedback("fd-feedback", table));
    }
    ctx.prepare_out()?;
    let (best, best_est, all) =
        mc::best_over_policies(&r.problem, &policies, mc_cfg.s, &x, mc_cfg.dt, mc_cfg.paths, ctx.seed)?;
    for e in &all {
        println!("{:<16} mean {:.6} se {:.6}", e.policy, e.mean, e.se);
    }
    println!("best policy {best}: lower bound {:.6}", best_est.lower_bound());
    let mut doc = json!({
        "problem": r.name,
        "s": mc_cfg.s,
        "x": x,
        "best": best_est,
        "estimates": all,
    });
    if let Some(v) = fd_value {
        println!("finite-difference value {v:.6}");
        doc["fd_value"] = json!(v);
    }
    if let Some(check) = &mc_cfg.stopping_check {
        let dt = check.dt.unwrap_or(r.problem.horizon / 32.0);
        let report =
            mc::randomized_stopping_check(&r.problem, mc_cfg.s, &x, dt, mc_cfg.paths, &check.r_levels, ctx.seed)?;
        println!(
            "stopping {:.6} ({}) vs randomized {:.6} ({}), gap {:.3e}",
            report.stopping_value, report.stopping_rule, report.intensity_value, report.intensity_rule, report.gap
        );
        doc["stopping_check"] = serde_json::to_value(&report).expect("report serializes");
    }
    ctx.write_text("mc.json", &pretty(&doc))?;
    Ok(())
}

pub fn suite(ctx: &Context) -> Result<(), CliError> {
    let run = ctx.config.suite.clone().unwrap_or_default();
    let names: Vec<String> = run
        .problems
        .clone()
        .unwrap_or_else(|| registry::NAMES.iter().map(|s| s.to_string()).collect());
    let mut problems: Vec<RegistryProblem> = Vec::new();
    for name in &names {
        problems.push(registry::default_problem(name)?);
    }
    let mut sc: SuiteConfig = run.config.clone().unwrap_or_default();
    if let Some(tol) = ctx.tol {
        sc.solver.tol = tol;
    }
    sc.solver.validate()?;
    ctx.prepare_out()?;
    let report = verify::property_suite(&problems, &sc);
    for r in &report.results {
        println!(
            "{} {:<24} {:<14} margin {:+.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.problem,
            r.margin
        );
    }
    let path = ctx.write_text("suite.json", &report.to_json())?;
    if report.passed {
        println!("all {} checks passed; report in {}", report.results.len(), path.display());
        Ok(())
    } else {
        let failed: Vec<String> = report.failures().map(|r| format!("{} on {}", r.name, r.problem)).collect();
        Err(CliError::property(failed.join(", ")))
    }
}

pub fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
