//! `hsmpc`: runs the experiment ladder and writes its artifacts.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_smpc::config::ExperimentConfig;
use hybrid_smpc::experiment::{ControllerKind, ModelKind};
use hybrid_smpc::{Error, Result};

use crate::commands::Run;

#[derive(Debug, Parser)]
#[command(
    name = "hsmpc",
    version,
    about = "Hybrid-model stochastic MPC experiments"
)]
struct Cli {
    /// TOML configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for data episodes, split, training and benchmark subsets.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs the data episodes and writes the dataset.
    GenerateData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Trains one residual model per output channel.
    Train {
        #[arg(long)]
        kind: ModelKind,
    },
    /// Noise-free step response of the plant, nominal and hybrid models.
    OpenLoop {
        /// Hybrid models to include; defaults to every trained one.
        #[arg(long = "model", value_delimiter = ',')]
        models: Vec<ModelKind>,
    },
    /// Seeded closed-loop episodes with the survival band.
    ClosedLoop {
        #[arg(long)]
        controller: ControllerKind,
        /// Comma-separated seeds or a range `a..b`; defaults to the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// GP-SMPC time over training sizes against BNN-SMPC.
    BenchmarkTiming,
    /// Renders SVG figures from result CSVs.
    Plot {
        /// CSV files to plot; defaults to every known result in the output directory.
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::OpenLoop { .. } => "open-loop",
            Command::ClosedLoop { .. } => "closed-loop",
            Command::BenchmarkTiming => "benchmark-timing",
            Command::Plot { .. } => "plot",
        }
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || {
        Error::Config(format!(
            "cannot parse seeds '{text}' (expected '0,1,2' or '0..10')"
        ))
    };
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.data.first_seed = seed;
        cfg.data.split_seed = seed;
        cfg.gp.training.seed = seed;
        cfg.bnn.seed = seed;
        cfg.benchmark.seed = seed;
    }
    if let Command::GenerateData { episodes: Some(n) } = cli.command {
        // keep the per-episode share of the target fixed
        cfg.data.target = cfg.data.target * n / cfg.data.episodes.max(1);
        cfg.data.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    let r = Run::new(cfg)?;
    match &cli.command {
        Command::GenerateData { .. } => commands::generate_data_cmd(r),
        Command::Train { kind } => commands::train_cmd(r, *kind),
        Command::OpenLoop { models } => commands::open_loop_cmd(r, models),
        Command::ClosedLoop { controller, seeds } => {
            let seeds = match seeds {
                Some(s) => parse_seeds(s)?,
                None => r.cfg.closed_loop.seeds.clone(),
            };
            commands::closed_loop_cmd(r, *controller, seeds)
        }
        Command::BenchmarkTiming => commands::benchmark_cmd(r),
        Command::Plot { inputs } => commands::plot_cmd(r, inputs),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidParameter(_) => "invalid_parameter",
        Error::IntegrationFailure { .. } => "integration_failure",
        Error::ZeroVariance(_) => "zero_variance",
        Error::EmptyInput(_) => "empty_input",
        Error::LengthMismatch { .. } => "length_mismatch",
        Error::NotPositiveDefinite { .. } => "not_positive_definite",
        Error::TrainingDiverged(_) => "training_diverged",
        Error::Solver(_) => "solver",
        Error::MissingColumn(_) => "missing_column",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn fail(command: Option<&str>, kind: &str, message: String, code: u8) -> ExitCode {
    let body =
        serde_json::json!({ "error": { "command": command, "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(None, "usage", e.render().to_string().trim().to_string(), 2),
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(Some(cli.command.name()), error_kind(&e), e.to_string(), 1),
    }
}
