//! `weightcert` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
//! 3 I/O error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AnalyzeArgs, AttackArgs, CertifyArgs, QuantizeArgs, SweepArgs, TrainArgs};

const THREADS_ENV: &str = "WEIGHTCERT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "weightcert",
    version,
    about = "Weight-perturbation certificates, robust training and weight attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a JSON config; writes model.json and run.csv.
    Train(TrainArgs),
    /// Certify every sample's margin; writes certificates.csv.
    Certify(CertifyArgs),
    /// Weight PGD over a grid of radii; writes attack.csv.
    Attack(AttackArgs),
    /// Generalization and bound statistics; writes analysis.csv.
    Analyze(AnalyzeArgs),
    /// Uniform weight quantization; writes model_q<bits>.json and quantize.csv.
    Quantize(QuantizeArgs),
    /// Train and attack over a hyperparameter grid; writes sweep.csv.
    Sweep(SweepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<weightcert::Error>())
    {
        Some(e) if e.is_numeric() => 2,
        Some(e) if e.is_io() => 3,
        Some(_) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            weightcert::Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Certify(a) => commands::certify(a),
        Command::Attack(a) => commands::attack(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Quantize(a) => commands::quantize_cmd(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
