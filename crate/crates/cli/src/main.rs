//! `cpnet`: generate data, decompose and perturb clouds, pre-train, probe
//! and gradient-check.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cpnet", version, about = "Contour-perturbed point cloud pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic shape files and a labels index.
    Gen(GenArgs),
    /// Split a cloud into its contour and content halves.
    Decompose(DecomposeArgs),
    /// Write the assistant-branch input for one cloud.
    Perturb(PerturbArgs),
    /// Pre-train from a run configuration.
    Pretrain(PretrainArgs),
    /// Fit a linear probe on frozen features of a checkpoint.
    Probe(ProbeArgs),
    /// Compare backpropagated gradients of the total loss with finite
    /// differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Shape kind, or a comma list of kinds (one label per kind).
    #[arg(long, default_value = "sphere")]
    pub kind: String,
    /// Points per cloud (at least 8).
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Clouds per kind.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinate noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Random rotation and this much per-axis scale jitter.
    #[arg(long)]
    pub posed: Option<f64>,
    /// xyz, off or ply; only ply keeps part labels.
    #[arg(long, default_value = "xyz")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Neighbours of the scoring graph.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long)]
    pub out_contour: PathBuf,
    #[arg(long)]
    pub out_content: PathBuf,
    /// Score report; defaults to the contour path with a `.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct PerturbArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Manner A to I.
    #[arg(long, default_value = "H")]
    pub manner: String,
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Neighbours of the scoring graph.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Clamp each noise coordinate to [-clip, clip].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Jitter exactly this many top-scored points instead of following the
    /// manner.
    #[arg(long)]
    pub jitter_count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long, required_unless_present = "print_default")]
    pub config: Option<PathBuf>,
    /// Overrides `out_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Print the documented default configuration and exit.
    #[arg(long)]
    pub print_default: bool,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// classify or segment.
    #[arg(long, default_value = "classify")]
    pub task: String,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    /// index.csv written by `gen`; without it a dataset is synthesized.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Kinds of the synthesized dataset; defaults to sphere,cube,torus for
    /// classification and barbell for segmentation.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub per_kind: usize,
    /// Points per synthesized cloud; defaults to the checkpoint's size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Random rotation and this much per-axis scale jitter.
    #[arg(long)]
    pub posed: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Seeds the synthesized data and the train/test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check this many sampled entries instead of all of them.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Decompose(a) => commands::decompose(&a),
        Command::Perturb(a) => commands::perturb(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
