use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odesep_cli::{cmd_fit, cmd_mc, cmd_profile, cmd_simulate, FitArgs, McArgs, ProfileArgs, SimulateArgs};

/// Estimate ODE parameters from noisy time series.
#[derive(Parser)]
#[command(name = "odesep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the model and write noisy observations.
    Simulate {
        model: PathBuf,
        /// Parameter values, e.g. "alpha=2,beta=2.4".
        #[arg(long)]
        theta: Option<String>,
        /// Initial values, e.g. "x1=2,x2=0.1".
        #[arg(long)]
        x0: Option<String>,
        /// "start:end:n" or a comma-separated list.
        #[arg(long)]
        times: String,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        sets: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the noiseless solution here.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Two-stage fit; writes a JSON summary.
    Fit {
        model: PathBuf,
        obs: PathBuf,
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Likelihood profiles and confidence intervals.
    Profile {
        model: PathBuf,
        obs: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Grid step as a percentage of each estimate.
        #[arg(long, default_value_t = 1.0)]
        step_pct: f64,
        /// Profile points (parameter, value, nll).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Intervals; standard output when absent.
        #[arg(long)]
        ci_out: Option<PathBuf>,
    },
    /// Fit every set separately and summarise the estimates.
    Mc {
        model: PathBuf,
        obs: PathBuf,
        #[arg(long)]
        parallel: bool,
        /// True values, e.g. "alpha=0.667,X=0.9"; adds bias and rmse columns.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate { model, theta, x0, times, sigma, seed, sets, out, truth_out } => {
            cmd_simulate(&SimulateArgs { model, theta, x0, times, sigma, seed, sets, out, truth_out })
        }
        Command::Fit { model, obs, parallel, out } => cmd_fit(&FitArgs { model, obs, parallel, out }),
        Command::Profile { model, obs, level, step_pct, out, ci_out } => cmd_profile(&ProfileArgs { model, obs, level, step_pct, out, ci_out }),
        Command::Mc { model, obs, parallel, truth, out } => cmd_mc(&McArgs { model, obs, parallel, truth, out }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
