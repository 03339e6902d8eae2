mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genref_core::encoder::InputVariant;

use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "genref", version, about = "Answer and rationale generation with iterative refinement")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub refine: Option<u8>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true, default_value_t = 8080)]
    pub port: u16,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum VariantArg {
    Qic,
    Qi,
    Qc,
}

impl From<VariantArg> for InputVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Qic => InputVariant::Qic,
            VariantArg::Qi => InputVariant::Qi,
            VariantArg::Qc => InputVariant::Qc,
        }
    }
}

impl Global {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            variant: self.variant.map(Into::into),
            refine: self.refine.map(usize::from),
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Toy-world dataset commands.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop once validation final-answer exact match reaches this percentage.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Greedy generation on a split, with metrics and a rating pool.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score hypothesis lines against reference lines.
    Eval {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    /// Train and score every refinement count and input variant.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        /// Use the tiny configuration (required).
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 3e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Serve the blinded rating study over HTTP.
    ServeRatings {
        /// Task pool JSON written by `generate`.
        #[arg(long)]
        pool: PathBuf,
        /// Append-only rating log; defaults to OUT/ratings.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        playlist: Option<usize>,
        #[arg(long)]
        ground_truth_ratio: Option<f64>,
    },
    /// Write per-step attention weights of one sample as JSON.
    AttnDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Generate a toy dataset.
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
