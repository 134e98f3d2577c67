//! Command-line front-end: train the workload forecaster, profile
//! instance capacity, run simulations, sweep parameter grids, and print
//! reports.
//!
//! Exit codes: 0 on success, 1 for configuration problems (bad flags,
//! invalid config file, conflicting options), 2 for runtime failures.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod common;
mod sweep;
mod train;

#[derive(Parser)]
#[command(
    name = "lmsim",
    version,
    about = "Simulates an LLM serving cluster under predictive management"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the window-load forecaster on a trace and save a checkpoint
    TrainForecaster(train::TrainArgs),
    /// Measure per-window instance capacity from a calibration run
    ProfileCapacity(common::ProfileArgs),
    /// Run one simulation and write its report files
    Simulate(common::SimulateArgs),
    /// Run a policy x QPS x seed grid and tabulate the results
    Sweep(sweep::SweepArgs),
    /// Print a summary of a finished run directory
    Report(common::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.cmd {
        Command::TrainForecaster(args) => train::cmd_train(&args),
        Command::ProfileCapacity(args) => common::cmd_profile(&args),
        Command::Simulate(args) => common::cmd_simulate(&args),
        Command::Sweep(args) => sweep::cmd_sweep(&args),
        Command::Report(args) => common::cmd_report(&args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
