//! Command-line front end for the volt/var synthesis pipeline.
//!
//! Stages communicate only through files, so any stage can be rerun in
//! isolation and a fixed seed reproduces every artifact byte for byte.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "voltvar", version, about = "Local volt/var controller synthesis for radial feeders")]
struct Cli {
    /// Worker threads for data-parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// `key = value` config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic feeder and daily injection profiles.
    Synth(commands::SynthArgs),
    /// Build the voltage-sensitivity model from feeder CSVs.
    Build(commands::BuildArgs),
    /// Sample scenarios and label them with dispatch-QP optima.
    Label(commands::LabelArgs),
    /// Fit per-node surrogates plus a voltage-only baseline.
    Train(commands::TrainArgs),
    /// Evaluate stability certificates for a trained surrogate set.
    Certify(commands::CertifyArgs),
    /// Run the closed loop against a linear or AC plant.
    Simulate(commands::SimulateArgs),
    /// Aggregate run artifacts into report.md and plot CSVs.
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOLTVAR_LOG", "info"))
        .format_timestamp(None)
        .init();
    configure_threads(cli.threads);

    let cfg = match cli.config.as_deref().map(config::RunConfig::load) {
        None => config::RunConfig::default(),
        Some(Ok(c)) => c,
        Some(Err(e)) => return fail(e),
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => commands::cmd_synth(a, &cfg),
        Cmd::Build(a) => commands::cmd_build(a, &cfg),
        Cmd::Label(a) => commands::cmd_label(a, &cfg),
        Cmd::Train(a) => commands::cmd_train(a, &cfg),
        Cmd::Certify(a) => commands::cmd_certify(a, &cfg),
        Cmd::Simulate(a) => commands::cmd_simulate(a, &cfg),
        Cmd::Report(a) => commands::cmd_report(a, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

/// Exit 2 for bad inputs (files, flags, formats), 1 for runtime failures
/// (divergence, infeasibility, failed certificates).
fn fail(e: voltvar::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_input_error() { 2 } else { 1 })
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) {
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: usize) {
    if threads > 0 {
        log::debug!("sequential build: --threads {threads} has no effect");
    }
}
