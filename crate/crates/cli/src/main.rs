//! `alphaloop` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "alphaloop", version, about = "Automated factor and model research over market panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic OHLCV panel and its planted score.
    GenData(GenDataArgs),
    /// Run the research loop.
    RunLoop(RunLoopArgs),
    /// Fit or load a model on a factor library and backtest the test range.
    Backtest(BacktestArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// At least two.
    #[arg(long, default_value_t = 100, value_parser = at_least_two)]
    pub instruments: usize,
    #[arg(long, default_value_t = 500)]
    pub dates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strength of the planted signal in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub signal: f64,
    /// Panel CSV path; the planted score goes next to it as `<stem>.planted.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulerKind {
    Bandit,
    Random,
    Llm,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Bandit => "bandit",
            SchedulerKind::Random => "random",
            SchedulerKind::Llm => "llm",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Template,
    Gateway,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Template => "template",
            GeneratorKind::Gateway => "gateway",
        }
    }
}

#[derive(Args)]
pub struct RunLoopArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel CSV; overrides the config's data section.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_loops: Option<usize>,
    #[arg(long, value_enum, default_value_t = SchedulerKind::Bandit)]
    pub scheduler: SchedulerKind,
    #[arg(long, value_enum, default_value_t = GeneratorKind::Template)]
    pub generator: GeneratorKind,
    /// Run directory for state, trajectory and exported artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the state stored in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Factor library JSON, or `alpha20` for the built-in baseline.
    #[arg(long, default_value = "alpha20")]
    pub factors: String,
    /// Model JSON written by `run-loop`; fitted with the default spec when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// TOML strategy settings.
    #[arg(long)]
    pub strategy_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub valid_frac: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad input that should exit like a flag error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn at_least_two(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(_) => Err("need at least 2 instruments".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::RunLoop(a) => commands::run_loop_cmd(&a),
        Command::Backtest(a) => commands::backtest_cmd(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
