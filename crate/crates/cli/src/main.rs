//! `epg`: train ensembles, check the IS bounds, compare runs, export KL
//! snapshots, and evaluate checkpoints.
//!
//! Exit codes: 0 success, 1 runtime or property failure, 2 usage error.

mod analyze;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "epg", version, about = "Ensemble policy-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one or more seeds and write run directories.
    Train(train::TrainArgs),
    /// Check the IS-deviation bounds on synthetic distributions.
    Verify(verify::VerifyArgs),
    /// Tabulate return, IS deviation and ESS rate across runs.
    Compare(analyze::CompareArgs),
    /// Copy a KL snapshot and its closest-agent sidecar for plotting.
    ExportKl(analyze::ExportArgs),
    /// Deterministic evaluation of a run's final checkpoint.
    Eval(analyze::EvalArgs),
}

/// A bad invocation the parser could not catch (exit 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A property check that ran and failed (exit 1).
#[derive(Debug)]
pub struct Violated(pub String);

impl std::fmt::Display for Violated {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violated {}

/// Root for default output paths: `$EPG_OUT_ROOT`, else `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os("EPG_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<epg_core::Error>() {
        Some(epg_core::Error::Config(_) | epg_core::Error::Degenerate(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Compare(a) => analyze::compare(a),
        Command::ExportKl(a) => analyze::export_kl(a),
        Command::Eval(a) => analyze::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
