//! `mwalk`: command-line front end for monitored quantum-walk return times.
//!
//! Exit codes: 0 success, 2 configuration error, 3 boundary case
//! (winding number not certified), 4 convergence or numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{RunArgs, RunConfig};

#[derive(Parser)]
#[command(name = "mwalk", version, about = "Return-time statistics of monitored quantum walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Amplitude series and return statistics at one parameter point
    Simulate(RunArgs),
    /// Winding number of the projective generating function
    Winding(RunArgs),
    /// Statistics over a one-parameter grid
    Sweep(RunArgs),
    /// Data behind the two figures (fig1: |nu_jk| at x = 1/7, fig2: |phi_eta,n|^2 at cos J tau = 1/2)
    Figure(RunArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<monitored_walk::Error> for CliError {
    fn from(e: monitored_walk::Error) -> Self {
        use monitored_walk::Error::*;
        let code = match &e {
            BoundaryCase(_) => 3,
            NotConverged(_)
            | NonDecaying { .. }
            | IllConditioned { .. }
            | NearSingularDenominator { .. }
            | ImaginaryResidual { .. }
            | Singularity { .. }
            | Linalg(_) => 4,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(format!("i/o error: {e}"))
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Winding(a) => ("winding", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Figure(a) => ("figure", a),
    };
    let cfg = RunConfig::resolve(name, args)?;
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Winding(_) => commands::winding(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Figure(_) => commands::figure(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
