//! Command-line front end: grid overlays, mask demos, encoding dumps,
//! gradient checks and training.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hindsight_core::patches::GridMode;

pub mod commands;
pub mod config;

pub use config::{ConfigError, RunConfig};

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable input, failed I/O or invalid data (exit 2).
    Data(String),
    /// A gradient check above tolerance (exit 3).
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => f.write_str(m),
            CliError::CheckFailed(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hindsight_core::Error> for CliError {
    fn from(e: hindsight_core::Error) -> Self {
        match e {
            hindsight_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "hindsight", version, about = "Hierarchical patch-graph image encoder")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw each grid level over the image and list patch counts.
    Grid(GridArgs),
    /// Mask cells of one grid level and report the fully masked patches.
    Mask(MaskArgs),
    /// Encode an image with trained weights and dump the graph state as CSV.
    Encode(EncodeArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Pretrain on a directory of PNG images.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "static", value_parser = parse_mode)]
    pub mode: GridMode,
    #[arg(long)]
    pub k: usize,
    /// Quadtree divisions (dynamic mode).
    #[arg(long = "D")]
    pub divisions: Option<usize>,
    /// Patch rescale side.
    #[arg(long = "H", default_value_t = 16)]
    pub rescale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub level: usize,
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturb every analytic gradient; the suite must then fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

fn parse_mode(s: &str) -> Result<GridMode, String> {
    s.parse().map_err(|e: hindsight_core::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Grid(a) => commands::grid(&a),
        Command::Mask(a) => commands::mask(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
    }
}
