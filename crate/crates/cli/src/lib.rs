//! Command-line driver: synthetic data generation, offline and
//! class-incremental training, evaluation, gradient checks and reports.
//!
//! Every run is driven by one [`config::RunConfig`]; command-line flags
//! override the file. Every CSV and JSON output carries the configuration
//! digest, and outputs are byte-identical across repeated runs.

pub mod commands;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use symseg::dataset::Preset;
use symseg::network::ModalityAvailability;

use config::{KdChoice, Overrides, RunConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "symseg",
    version,
    about = "Symmetric RGB-LiDAR segmentation with class-incremental training"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Class schedule: offline, 11-8, 6-5-8, 11-1, 6-1 or any dash-separated sizes.
    #[arg(long, global = true, value_name = "PRESET")]
    pub preset: Option<Preset>,
    /// Distillation variant: same, img, pcd, cross or none.
    #[arg(long, global = true, value_name = "KD")]
    pub kd: Option<KdChoice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Both,
    Rgb,
    Lidar,
}

impl From<ModalityArg> for ModalityAvailability {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Both => ModalityAvailability::BOTH,
            ModalityArg::Rgb => ModalityAvailability::COLOR_ONLY,
            ModalityArg::Lidar => ModalityAvailability::LIDAR_ONLY,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train and eval splits as scans, labels and images.
    GenerateData,
    /// Train every step of the schedule, resuming from saved steps.
    Train,
    /// Score a checkpoint on the eval split.
    Evaluate {
        /// Single input setting; all three plus averages when omitted.
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// Checkpoint to score; defaults to the last step under the output dir.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Per-class IoU table of a finished training run.
    Report,
}

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: {0}")]
pub struct GradcheckFailed(pub String);

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            preset: self.preset.clone(),
            kd: self.kd,
        }
    }

    /// File configuration (or defaults) with flags applied, validated.
    pub fn resolve(&self) -> symseg::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.global.resolve()?;
    match &cli.command {
        Command::GenerateData => commands::generate_data(&cfg),
        Command::Train => commands::train(&cfg).map(|_| ()),
        Command::Evaluate { modality, checkpoint } => {
            commands::evaluate(&cfg, modality.map(Into::into), checkpoint.as_deref())
        }
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<GradcheckFailed>() {
            return EXIT_GRADCHECK;
        }
        if let Some(e) = cause.downcast_ref::<symseg::Error>() {
            return match e {
                symseg::Error::Config(_) | symseg::Error::InvalidArgument(_) => EXIT_CONFIG,
                symseg::Error::Io { .. } | symseg::Error::Format { .. } => EXIT_DATA,
                symseg::Error::Divergence { .. } | symseg::Error::NonFinite(_) => EXIT_DIVERGENCE,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}
