//! Command-line driver: argument parsing and subcommand dispatch.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use leaffm::parallel::with_threads;
use leaffm::Parallelism;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "leaffm", version, about = "Train, serve and inspect factorization machines with generated features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for batch-parallel work (1 is deterministic and sequential).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `data`, writing config, log, checkpoint and folded model into `out`.
    Train(Common),
    /// Report AUC and logloss of a checkpoint (or `model`) on `data`.
    Evaluate(Common),
    /// Fold a checkpoint into a serving model file.
    Export(Common),
    /// Score raw lines from stdin with a folded model.
    Score(Common),
    /// Finite-difference check of every gradient on tiny random models.
    Gradcheck(Common),
    /// Write a synthetic teacher-labelled dataset into `out`.
    Synth(Common),
    /// Train once per value of `sweep_axis` and print a results table.
    Sweep(Common),
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> Result<ExitCode>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(argv);
    let common = match &cli.command {
        Command::Train(c)
        | Command::Evaluate(c)
        | Command::Export(c)
        | Command::Score(c)
        | Command::Gradcheck(c)
        | Command::Synth(c)
        | Command::Sweep(c) => c,
    };
    let cfg = RunConfig::load(common.config.as_ref(), &common.overrides)?;
    let threads = common.threads.max(1);
    let mode = Parallelism::from_threads(threads);
    with_threads(threads, || {
        match cli.command {
            Command::Train(_) => commands::train(&cfg, mode)?,
            Command::Evaluate(_) => commands::evaluate_cmd(&cfg, mode)?,
            Command::Export(_) => commands::export(&cfg, mode)?,
            Command::Score(_) => commands::score(&cfg)?,
            Command::Gradcheck(_) => {
                if !commands::gradcheck(&cfg)? {
                    return Ok(ExitCode::FAILURE);
                }
            }
            Command::Synth(_) => commands::synth(&cfg)?,
            Command::Sweep(_) => commands::sweep(&cfg, mode)?,
        }
        Ok(ExitCode::SUCCESS)
    })
}
