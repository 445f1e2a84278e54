//! File formats and command-line workflows around `evfuse-core`.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O
//! or file format error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod pgm;
pub mod provenance;
pub mod tensorfile;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "evfuse", version, about = "Evidential segmentation fusion toolkit")]
pub struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Combine two or more evidence maps pixel by pixel
    Fuse(FuseArgs),
    /// Compare loss gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic CT/PET dataset
    Synth(SynthArgs),
    /// Train the evidence heads on a dataset
    TrainToy(TrainArgs),
    /// Score predicted masks against a dataset
    Eval(EvalArgs),
    /// Track DSC and uncertainty under growing perturbation
    PerturbSweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Evidence maps `[C, H, W]` as .evf tensors
    #[arg(required = true, num_args = 2..)]
    pub inputs: Vec<PathBuf>,
    /// Output prefix
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ace, kl, dice, up, seg or all
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub count: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset written by `synth`
    #[arg(long)]
    pub data: PathBuf,
    /// Optional validation dataset
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<case>.pgm` masks
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Predict with trained heads instead
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write predicted masks and uncertainty maps
    #[arg(long, requires = "checkpoint")]
    pub save: Option<PathBuf>,
    /// Metrics CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// noise or mask
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated levels
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    cfg.set_all(&cli.set)?;
    match cli.command {
        Command::Fuse(a) => commands::fuse(&cfg, &a),
        Command::Gradcheck(a) => commands::gradcheck(cfg, &a),
        Command::Synth(a) => commands::synth(cfg, &a),
        Command::TrainToy(a) => commands::train_toy(cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::PerturbSweep(a) => commands::perturb_sweep(cfg, &a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("evfuse: {e}");
            e.exit_code()
        }
    }
}
