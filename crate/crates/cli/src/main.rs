use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod files;

use commands::CliError;

#[derive(Parser)]
#[command(name = "vbl", version, about = "Bit allocation for cooperative vision-based localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario file and print its dimensions.
    Gen {
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate a bit budget with one algorithm and write the allocation.
    Allocate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        budget: u64,
        #[arg(long, default_value = "vgd", value_parser = commands::parse_algorithm)]
        algo: vbl_core::alloc::Algorithm,
        #[command(flatten)]
        tuning: Tuning,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several algorithms over a range of budgets and write one CSV row
    /// per (budget, algorithm).
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Inclusive range `start:stop:step`.
        #[arg(long, value_parser = commands::parse_budget_range)]
        budgets: commands::BudgetRange,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "uniform,vgd,decouple,sa",
            value_parser = commands::parse_algorithm
        )]
        algos: Vec<vbl_core::alloc::Algorithm>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        tuning: Tuning,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo comparison of the estimation error with the bound.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        allocation: PathBuf,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Toy,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Master seed.
    #[arg(long, env = "VBL_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Copy)]
pub struct Tuning {
    /// Grid step for the camera share.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 100)]
    pub rounding_trials: usize,
    /// Row/column sweeps of the decoupling algorithm.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    /// Annealing start temperature; chosen automatically when omitted.
    #[arg(long)]
    pub sa_initial_temperature: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    pub sa_cooling: f64,
    #[arg(long, default_value_t = 200)]
    pub sa_moves: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sa_stop_acceptance: f64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { preset, seed, out } => commands::gen(matches!(preset, Preset::Toy), seed.seed, &out),
        Command::Allocate {
            scenario,
            budget,
            algo,
            tuning,
            seed,
            out,
        } => commands::allocate(&scenario, budget, algo, &tuning, seed.seed, &out),
        Command::Sweep {
            scenario,
            budgets,
            algos,
            jobs,
            tuning,
            seed,
            out,
        } => commands::sweep(&scenario, &budgets.0, &algos, jobs, &tuning, seed.seed, &out),
        Command::Validate {
            scenario,
            allocation,
            trials,
            seed,
            out,
        } => commands::validate(&scenario, &allocation, trials, seed.seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            if let CliError::Core(vbl_core::Error::NoFeasibleAllocation { diagnostics }) = &e {
                for line in diagnostics {
                    eprintln!("note: {line}");
                }
            }
            ExitCode::from(e.exit_status())
        }
    }
}
