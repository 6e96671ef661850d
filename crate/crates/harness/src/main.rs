use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pedel::instances::{make_hard_bandit, HardBandit};
use pedel::lower_bound::bound_report;
use pedel_harness::{run_campaign, sweep, ExperimentConfig, SweepAxis};

#[derive(Parser)]
#[command(name = "pedel-harness", about = "Seeded experiment campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one campaign.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one campaign per axis value.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form and numeric lower bounds for the hard instance.
    LowerBound {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long = "Delta")]
        gap: f64,
        /// Arm scale of the desk-scale instance, used when the gap is too large
        /// for the parameter-faithful one.
        #[arg(long, default_value_t = 0.5)]
        xi: f64,
        #[arg(long, default_value_t = 12)]
        grid: usize,
    },
}

fn load(path: &PathBuf) -> pedel::Result<ExperimentConfig> {
    ExperimentConfig::from_json(&fs::read_to_string(path)?)
}

fn run(cli: Cli) -> pedel::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let s = run_campaign(&load(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&s.summaries)?);
        }
        Command::Sweep { axis, values, config } => {
            let rows = sweep(&load(&config)?, axis, &values)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::LowerBound { d, delta, gap, xi, grid } => {
            let bandit = match make_hard_bandit(d, gap, 0.5, 1.0, 1.0) {
                Ok(b) => b,
                Err(_) => {
                    eprintln!(
                        "gap outside the faithful range: using the desk-scale instance with gamma^2 = d Delta, \
                         where the closed form need not lie below the numeric value"
                    );
                    HardBandit::scaled(d, xi, (d as f64 * gap).sqrt(), gap)?
                }
            };
            let report = bound_report(&bandit, delta, grid)?;
            println!("{}", report.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_contract() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
