//! `lesion`: prepare, split, train, predict, evaluate and report.

mod cache;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lesion_core::splits::Partition;

use crate::commands::PartitionArg;
use crate::config::{RawConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] lesion_core::Error),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 non-finite numerics.
    fn exit_code(&self) -> u8 {
        use lesion_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidArgument(_)) => 1,
            CliError::Core(E::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lesion", version, about = "Two-task skin lesion classification pipeline")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// task1 (melanoma) or task2 (seborrheic keratosis).
    #[arg(long, global = true)]
    task: Option<String>,
    /// scratch, feature-extractor, finetune or hybrid.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    images_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    ground_truth: Option<PathBuf>,
    #[arg(long, global = true)]
    metadata: Option<PathBuf>,
    /// Any config key, e.g. `--set schedule=desk`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode, preprocess and cache every image.
    Prepare,
    /// Write the stratified split plan for the task.
    Split,
    /// Train the configured model; writes histories and best checkpoints.
    Train,
    /// Score a partition (or `all`) into a submission file.
    Predict {
        #[arg(long, default_value = "test")]
        partition: String,
        /// Checkpoint to use instead of the run's best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics for the configured model and task.
    Evaluate {
        #[arg(long, default_value = "test")]
        partition: String,
    },
    /// Results table over every available prediction file.
    Report {
        #[arg(long, default_value = "test")]
        partition: String,
    },
    /// Write a synthetic shape dataset for toy runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.2)]
        melanoma_fraction: f64,
        #[arg(long, default_value_t = 0.15)]
        keratosis_fraction: f64,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::from_file(path)?,
        None => RawConfig::default(),
    };
    let mut flags = RawConfig::default();
    for pair in &cli.set {
        flags.set_pair(pair)?;
    }
    let path = |p: &PathBuf| p.display().to_string();
    if let Some(v) = cli.seed {
        flags.set("seed", v.to_string())?;
    }
    if let Some(v) = &cli.work_dir {
        flags.set("work_dir", path(v))?;
    }
    if let Some(v) = &cli.task {
        flags.set("task", v.as_str())?;
    }
    if let Some(v) = &cli.model {
        flags.set("model", v.as_str())?;
    }
    if let Some(v) = &cli.images_dir {
        flags.set("images_dir", path(v))?;
    }
    if let Some(v) = &cli.ground_truth {
        flags.set("ground_truth", path(v))?;
    }
    if let Some(v) = &cli.metadata {
        flags.set("metadata", path(v))?;
    }
    raw.merge(flags);
    RunConfig::from_raw(&raw)
}

fn partition(s: &str) -> Result<Partition, CliError> {
    s.parse().map_err(|e: lesion_core::Error| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = run_config(&cli)?;
    if let Some(n) = cfg.threads {
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Prepare => {
            let failed = commands::prepare(&cfg)?;
            if failed > 0 {
                return Err(CliError::Data(format!("{failed} images could not be prepared")));
            }
            Ok(())
        }
        Command::Split => commands::split(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Predict {
            partition,
            checkpoint,
        } => commands::predict(&cfg, PartitionArg::parse(partition)?, checkpoint.as_deref()).map(|_| ()),
        Command::Evaluate { partition: p } => commands::evaluate(&cfg, partition(p)?),
        Command::Report { partition: p } => commands::report(&cfg, partition(p)?),
        Command::Synth {
            out,
            count,
            size,
            melanoma_fraction,
            keratosis_fraction,
        } => commands::synth(&commands::SynthArgs {
            out: out.clone(),
            count: *count,
            size: *size,
            melanoma_fraction: *melanoma_fraction,
            keratosis_fraction: *keratosis_fraction,
            seed: cfg.seed()?,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
