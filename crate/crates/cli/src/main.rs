//! Command-line front end for the looped-transformer lab.
//!
//! Exit codes: 0 success, 1 verification failure, 2 user or configuration
//! error, 3 numeric abort (non-finite loss).

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{generate, plot, profile, train, verify};

#[derive(Parser)]
#[command(
    name = "melt",
    about = "Looped transformer with a gated constant-memory KV cache: train, generate, profile memory, verify",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the baseline teacher and/or the shared-cache student.
    Train(train::TrainArgs),
    /// Decode from a checkpoint and report cache accounting.
    Generate(generate::GenerateArgs),
    /// Closed-form memory tables and live cross-checks.
    Profile(profile::ProfileArgs),
    /// Run the verification suites.
    Verify(verify::VerifyArgs),
    /// Render SVG plots from a metrics stream.
    Plot(plot::PlotArgs),
}

/// Output directory: explicit flag, else `$MELT_OUT_ROOT/<command>-<utc>`.
fn resolve_out(explicit: Option<&PathBuf>, command: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let root = std::env::var("MELT_OUT_ROOT").unwrap_or_else(|_| "runs".to_string());
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    PathBuf::from(root).join(format!("{command}-{stamp}"))
}

fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.cmd {
        Cmd::Train(args) => {
            let out = resolve_out(args.out.as_ref(), "train");
            train::run(args, &out)
        }
        Cmd::Generate(args) => generate::run(args),
        Cmd::Profile(args) => profile::run(args),
        Cmd::Verify(args) => {
            let out = resolve_out(args.out.as_ref(), "verify");
            verify::run(args, &out)
        }
        Cmd::Plot(args) => {
            let out = resolve_out(args.out.as_ref(), "plot");
            plot::run(args, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<melt_core::Error>() {
                Some(melt_core::Error::NumericAbort { .. }) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
