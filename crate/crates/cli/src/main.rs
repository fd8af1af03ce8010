mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfbsde::Error;

use crate::commands::{problem_of, run, Context};
use crate::config::{Command, Options, RunConfig, SeedSource, SEED_ENV};

/// Forward-backward SDEs under G-Brownian motion.
#[derive(Parser)]
#[command(name = "gfbsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Existence/uniqueness certificate and the contraction constants.
    Certify(Options),
    /// G-expectation of a payoff of B_T by lattice and Monte Carlo.
    Gexp(Options),
    /// Forward equation with a frozen Y; mean and quantiles per control.
    SolveSde(Options),
    /// Backward equation with a frozen Y; value slices and K checks.
    SolveBsde(Options),
    /// Coupled problem by Picard iteration.
    SolveFbsde(Options),
    /// Comparison battery over seeds and grids.
    Compare(Options),
    /// Comparison and duality check on a problem's pair.
    Duality(Options),
    /// Run the command described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_FAIL: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotCertified(_) => EXIT_FAIL,
        Error::NonFinite { .. } | Error::BoundViolation(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn to_config(sub: Sub) -> Result<RunConfig, Error> {
    let (command, options) = match sub {
        Sub::Certify(o) => (Command::Certify, o),
        Sub::Gexp(o) => (Command::Gexp, o),
        Sub::SolveSde(o) => (Command::SolveSde, o),
        Sub::SolveBsde(o) => (Command::SolveBsde, o),
        Sub::SolveFbsde(o) => (Command::SolveFbsde, o),
        Sub::Compare(o) => (Command::Compare, o),
        Sub::Duality(o) => (Command::Duality, o),
        Sub::Run { config } => return RunConfig::load(&config),
    };
    Ok(RunConfig { command, options })
}

fn execute(cfg: RunConfig) -> Result<Option<String>, Error> {
    cfg.check()?;
    let env = std::env::var(SEED_ENV).ok();
    let (seed, source) = cfg.resolve_seed(env.as_deref())?;
    match source {
        SeedSource::Environment => log::warn!("seed {seed} taken from {SEED_ENV}"),
        SeedSource::Default => log::info!("seed {seed} (default)"),
        SeedSource::Config => {}
    }
    if let Some(n) = cfg.options.threads {
        if n == 0 {
            return Err(Error::Config {
                key: "threads".into(),
                message: "must be positive".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                key: "threads".into(),
                message: e.to_string(),
            })?;
    }
    let problem = problem_of(&cfg)?;
    let hash = cfg.hash(seed, problem.as_ref().map_or("", |p| p.source.as_str()));
    let ctx = Context { cfg: &cfg, seed, hash };
    let outcome = run(&ctx, problem.as_ref())?;
    output::emit(&outcome.artifacts)?;
    Ok(outcome.failure)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match to_config(cli.command).and_then(execute) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(reason)) => {
            eprintln!("FAIL: {reason}");
            ExitCode::from(EXIT_FAIL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
