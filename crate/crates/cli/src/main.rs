//! `mtp`: generate synthetic datasets, train and evaluate multimodal predictors.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Settings;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mtp", version, about = "Multimodal trajectory prediction toolkit")]
struct Cli {
    /// Worker threads; 1 gives the deterministic single-threaded path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration (defaults merged with --config) and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Config file used by --print-config when no subcommand is given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured scenario and write a dataset directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a predictor on a dataset.
    Eval(EvalArgs),
    /// Write PPM images of dataset or regenerated samples.
    Rasterize(RasterizeArgs),
    /// Merge CSV reports into one markdown table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; defaults to the tail of --data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Best-validation checkpoint; the latest state goes to `<out>.last`.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV log file (stdout when absent).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Model,
    Baseline,
    Oracle,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: PredictorKind,
    /// Method name in the report.
    #[arg(long)]
    pub name: Option<String>,
    /// CSV report (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// Calibration table as CSV; needs at least two modes.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RasterizeArgs {
    /// Dataset to read rasters from.
    #[arg(long, conflicts_with = "config")]
    pub data: Option<PathBuf>,
    /// Scenario config to regenerate samples from; needed for --lane.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sample indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Render the followed-lane channel for these lane ids.
    #[arg(long)]
    pub lane: Vec<i64>,
    /// Channels mapped to red, green and blue.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
}

fn load_settings(path: Option<&PathBuf>) -> Result<Settings, CliError> {
    match path {
        None => Ok(Settings::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
            Settings::parse(&text)
        }
    }
}

fn command_config(cmd: &Option<Command>) -> Option<&PathBuf> {
    match cmd {
        Some(Command::Generate { config, .. }) => config.as_ref(),
        Some(Command::Train(a)) => a.config.as_ref(),
        Some(Command::Eval(a)) => a.config.as_ref(),
        Some(Command::Rasterize(a)) => a.config.as_ref(),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if cli.print_config {
        let path = command_config(&cli.command).or(cli.config.as_ref());
        print!("{}", load_settings(path)?.dump());
        return Ok(());
    }
    match cli.command {
        None => Err(CliError::Usage("no command given; see --help".into())),
        Some(Command::Generate { config, out }) => commands::generate(&load_settings(config.as_ref())?, &out),
        Some(Command::Train(a)) => commands::train(&load_settings(a.config.as_ref())?, &a),
        Some(Command::Eval(a)) => commands::eval(&load_settings(a.config.as_ref())?, &a),
        Some(Command::Rasterize(a)) => commands::rasterize(&a, load_settings(a.config.as_ref())?),
        Some(Command::Compare { reports, out }) => commands::compare(&reports, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
