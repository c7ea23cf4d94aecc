mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use instlabel_core::eval::Level;
use instlabel_core::Error;

/// Exit statuses. Usage errors from argument parsing also exit with 2.
pub mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const TRAINING: u8 = 4;
    pub const REFUSED: u8 = 5;
    pub const DATA: u8 = 6;
    pub const INTERRUPTED: u8 = 130;
}

#[derive(Parser, Debug)]
#[command(name = "instlabel", version, about = "Attention MIL teacher, bag-level VAT and instance-level distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the bags described by the config and write a manifest.
    Prepare(Common),
    /// Train teacher and/or student for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Fold whose train/validation split is used.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Score saved checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A single checkpoint; by default every checkpoint of every seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Teacher AUROC with and without VAT over training-set and bag sizes.
    Sweep(Common),
    /// k-fold cross-validation of baseline, teacher and student.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
    },
    /// Render sweep series and training logs as SVG figures.
    Plot {
        /// Sweep series (`sweep_series.tsv`) or training logs (`*.jsonl`).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for the figures; defaults to each input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Root seeds, comma separated; replaces `training.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Replace outputs that already exist.
    #[arg(long)]
    pub force: bool,
    /// Concurrent jobs (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Output directory; replaces `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArg {
    Teacher,
    Student,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelArg {
    Bag,
    Instance,
    Both,
}

impl LevelArg {
    pub fn levels(self) -> Vec<Level> {
        match self {
            LevelArg::Bag => vec![Level::Bag],
            LevelArg::Instance => vec![Level::Instance],
            LevelArg::Both => vec![Level::Bag, Level::Instance],
        }
    }
}

/// Existing output that `--force` would overwrite.
#[derive(Debug, thiserror::Error)]
#[error("{0} already exists; pass --force to overwrite")]
pub struct Refused(pub PathBuf);

/// A required input produced by an earlier command is absent.
#[derive(Debug, thiserror::Error)]
#[error("{what} not found at {path}")]
pub struct MissingInput {
    pub what: &'static str,
    pub path: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Refused>().is_some() {
        return exit::REFUSED;
    }
    if err.downcast_ref::<MissingInput>().is_some() {
        return exit::IO;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape { .. }) => exit::CONFIG,
        Some(Error::Io { .. } | Error::Parse { .. } | Error::Image(_)) => exit::IO,
        Some(Error::Training(_)) => exit::TRAINING,
        Some(Error::Interrupted) => exit::INTERRUPTED,
        Some(Error::InvalidInput(_) | Error::Empty(_) | Error::SingleClass) => exit::DATA,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = ctrlc::set_handler(|| {
        log::warn!("interrupt received; stopping after the current step");
        instlabel_core::request_interrupt();
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    let result = match cli.command {
        Command::Prepare(common) => commands::prepare(&common),
        Command::Train { common, stage, fold } => commands::train(&common, stage, fold),
        Command::Evaluate { common, checkpoint, level, fold } => commands::evaluate(&common, checkpoint.as_deref(), level, fold),
        Command::Sweep(common) => commands::sweep(&common),
        Command::Crossval { common, level } => commands::crossval(&common, level),
        Command::Plot { inputs, out } => plot::run(&inputs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
