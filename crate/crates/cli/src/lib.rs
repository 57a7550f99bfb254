//! Command-line front end for `slom`.
//!
//! Four subcommands: `train` fits a target network or a five-member oracle,
//! `attack` runs one type I or type II attack, `compare-layers` runs both
//! attack kinds at every tap over several seeds and checks the expected
//! orderings, and `audit` reports the structural analysis of an
//! architecture.

pub mod commands;
pub mod config;
pub mod error;
pub mod harness;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "slom",
    version,
    about = "Strict layer-output manipulation attacks"
)]
pub struct Cli {
    /// Seed for initialisation, shuffling, noise and sample choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with default option values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs (default `out`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Trace interval in iterations.
    #[arg(long, global = true)]
    pub log_every: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network, or an oracle of five.
    Train(TrainArgs),
    /// Run one attack and dump its trace, result and images.
    Attack(AttackArgs),
    /// Run both attack kinds at several taps and rank the layers.
    CompareLayers(CompareArgs),
    /// Underconstraint and amplification analysis of an architecture.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Directory with the IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Weight file (default `<out-dir>/target.w`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train five members, one per `--seeds` entry.
    #[arg(long)]
    pub oracle: bool,
    /// Member seeds for `--oracle` (default `1,2,3,4,5`).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on the first N samples only.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// 1 (large change, same class) or 2 (small change, new class).
    #[arg(long = "type")]
    pub kind: Option<u8>,
    /// Tap name such as `pool2` (default `pool2`).
    #[arg(long)]
    pub tap: Option<String>,
    /// Source sample as `idx:N` into the test split.
    #[arg(long)]
    pub sample: Option<String>,
    /// Donor sample as `idx:N` (type 2).
    #[arg(long)]
    pub donor: Option<String>,
    /// Without `--sample`, the seed picks an eligible sample of this class
    /// (default 0).
    #[arg(long)]
    pub source_class: Option<usize>,
    /// Without `--donor`, the seed picks an eligible donor of this class
    /// (default 3).
    #[arg(long)]
    pub donor_class: Option<usize>,
    /// `mnist` (default) or `large`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Explicit schedule `iterations:step,...`.
    #[arg(long)]
    pub steps: Option<String>,
    /// Constant schedule length (with `--step`).
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    /// `off` (default), `exp:L0:GAMMA` or `decay:L0:FINAL`.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Oracle label for type 1 (default: the oracle's class of the source).
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long)]
    pub oracle_spec: Option<PathBuf>,
    /// Five comma-separated member weight files.
    #[arg(long, value_delimiter = ',')]
    pub oracle_weights: Option<Vec<PathBuf>>,
    /// Do not clamp to [0, 1] after each step.
    #[arg(long)]
    pub no_clamp: bool,
    /// Output file prefix (default `attack`).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `A..B` or a comma list (default: the global seed).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated tap names (default: all taps).
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
    /// Default 800.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Default 1.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub source_class: Option<usize>,
    #[arg(long)]
    pub donor_class: Option<usize>,
    /// Output file prefix (default `compare`).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Trained weights; enables the amplification factor and measurement.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Noise std for the measured amplification (default 0.01).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Monte Carlo trials (default 1000).
    #[arg(long)]
    pub trials: Option<usize>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
