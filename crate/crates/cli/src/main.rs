//! `nbellman`: solve, study convergence, run Monte Carlo checks and the
//! property suite from a JSON run configuration.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::{ModeName, RegistrySource, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "nbellman", version, about = "Finite-difference solver for normalized Bellman equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides "out" in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Monte Carlo seed; overrides "seed" in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed-point tolerance; overrides solver.tol.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeName>,
    /// Registry problem, replacing any problem source in the config.
    #[arg(long, global = true)]
    registry: Option<String>,
    /// Registry parameter override, `key=value`; repeatable.
    #[arg(long = "param", global = true)]
    params: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve on one grid and write the field, diagnostics and probe values.
    Solve,
    /// Run a convergence study over a grid ladder.
    Converge,
    /// Estimate policy payoffs by Monte Carlo.
    Mc,
    /// Run the property suite over registry problems.
    Suite,
}

fn context(common: &Common) -> Result<Context, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.registry {
        config.problem = None;
        config.problem_file = None;
        config.registry = Some(RegistrySource {
            name: name.clone(),
            params: config::parse_params(&common.params)?,
        });
    } else if !common.params.is_empty() {
        let src = config
            .registry
            .as_mut()
            .ok_or_else(|| CliError::config("--param only applies to registry problems"))?;
        src.params.extend(config::parse_params(&common.params)?);
    }
    if let Some(tol) = common.tol {
        if !(tol > 0.0) {
            return Err(CliError::config(format!("--tol must be positive, got {tol}")));
        }
    }
    Ok(Context {
        out: commands::out_dir(common.out.as_deref(), &config),
        seed: common.seed.or(config.seed).unwrap_or(0),
        tol: common.tol,
        mode: common.mode,
        config,
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = context(&cli.common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Solve => commands::solve(&ctx),
        Command::Converge => commands::converge(&ctx),
        Command::Mc => commands::monte_carlo(&ctx),
        Command::Suite => commands::suite(&ctx),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nbellman: {e}");
            e.exit_code()
        }
    }
}
