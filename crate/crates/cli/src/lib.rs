//! `stagevar` command-line front end: `generate`, `rank-stats`, `bench` and
//! `sweep` over a TOML run configuration with flag overrides.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 I/O.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{parse_alpha_list, AlphaTarget, Format, Overrides, RunConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn from_core(e: stagevar_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stagevar", version, about = "Next-scale VAR generation with stage-aware refinement acceleration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate images, traces and a run manifest.
    Generate(Shared),
    /// Build a rank table from the corpus seeds.
    RankStats(Shared),
    /// Time the requested variants on shared seeds.
    Bench(Shared),
    /// Sweep the energy threshold.
    Sweep(Shared),
}

#[derive(Debug, Args)]
struct Shared {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single prompt seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// vanilla or 1-6.
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated thresholds: stage alphas for generate and bench,
    /// table alphas for rank-stats, sweep alphas for sweep.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    /// Report format.
    #[arg(long)]
    format: Option<Format>,
}

fn load_config(shared: &Shared, target: AlphaTarget) -> Result<RunConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: shared.seed,
        out: shared.out.clone(),
        variant: shared.variant,
        alphas: shared
            .alpha
            .as_deref()
            .map(parse_alpha_list)
            .transpose()
            .map_err(CliError::Config)?,
        format: shared.format,
    };
    cfg.apply(&overrides, target);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(s) => commands::generate(&load_config(&s, AlphaTarget::Stage)?),
        Command::RankStats(s) => commands::rank_stats(&load_config(&s, AlphaTarget::RankTable)?),
        Command::Bench(s) => commands::bench(&load_config(&s, AlphaTarget::Stage)?),
        Command::Sweep(s) => commands::sweep(&load_config(&s, AlphaTarget::Sweep)?),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("stagevar: {e}");
            e.exit_code()
        }
    }
}
