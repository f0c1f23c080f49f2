//! Argument parsing and dispatch for the `hpgan` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 runtime
//! failure.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hpgan_core::evaluation::Profile;

pub use config::{resolve_config, ConfigOverrides};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "hpgan", version, about = "Multi-hypothesis GAN anomaly detector for PM sensor days")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on the normal samples of a dataset.
    Train(TrainArgs),
    /// Score and classify samples with a trained model.
    Detect(DetectArgs),
    /// Repeated train/test runs summarized as mean and standard deviation.
    Eval(EvalArgs),
    /// Kernel x blocks x learning-rate grid search.
    Grid(GridArgs),
    /// The six LM/VB/MH flag combinations on one split.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub normal: usize,
    #[arg(long, default_value_t = 60)]
    pub abnormal: usize,
    #[arg(long, env = "HPGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Fault family weights as spike,stuck,dropout,drift.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub mix: Option<Vec<f64>>,
    /// Output file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// JSON document with ModelConfig fields; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_profile, default_value = "desk")]
    pub profile: Profile,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HPGAN_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print the epoch-mean losses to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Verdict file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the multiplier of the fitted threshold.
    #[arg(long)]
    pub multiplier: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
    #[arg(long, env = "HPGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Directory for CSV/JSON reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HPGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HPGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: hpgan_core::Error| e.to_string())
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<hpgan_core::Error> for Failure {
    fn from(e: hpgan_core::Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("hpgan: {f}");
            f.exit_code()
        }
    }
}
