//! `udta`: static profiler and desk-scale training pipeline.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for a failure, by error kind.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INVARIANT: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "udta", version, about = "Unidirectional thin adapters: profiler and training pipeline")]
pub struct Cli {
    /// Output root (defaults to $UDTA_OUT_DIR, then ./udta-out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Static FLOPs / parameter report; no tensor math is executed.
    Profile(ProfileArgs),
    /// Generate the synthetic source and target datasets.
    GenData(GenDataArgs),
    /// Stage 1: pretrain backbone and classifier on the source task.
    Pretrain(StageArgs),
    /// Stage 2: train the autoencoders on frozen source activations.
    TrainAe(StageArgs),
    /// Stage 3: train thin adapters and classifier on the target task.
    Adapt(AdaptArgs),
    /// Stage 3 with a baseline configuration.
    Baseline(BaselineArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Model spec JSON (defaults to the bundled full-size spec).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated configs, or `all`.
    #[arg(long, default_value = "all")]
    pub configs: String,
    /// Sweep the UDTA stack: `b=1,3,5,7` or `u=2,4,6,8`.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch: u64,
    #[arg(long, default_value_t = 1)]
    pub mac_cost: u64,
    #[arg(long, value_enum, default_value_t = BackwardRule::Doubled)]
    pub backward: BackwardRule,
    /// Label of the reference row for ratio columns.
    #[arg(long, default_value = "model_patch")]
    pub reference: String,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackwardRule {
    Doubled,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Synthetic-data spec JSON with `source` and/or `target` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override both dataset seeds.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct StageArgs {
    /// JSON file with stage overrides (`epochs`, `lr`, `batch_size`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model spec JSON (defaults to the bundled desk spec).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Dataset directory holding `train.udtd` and `test.udtd`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Backbone checkpoint (stages 2 and 3).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated seeds; each runs isolated under `seed-<s>/`.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Encoder checkpoint from `train-ae`.
    #[arg(long)]
    pub encoders: Option<PathBuf>,
    /// Train the encoders too (and skip `train-ae`).
    #[arg(long)]
    pub joint_encoder: bool,
}

#[derive(Args, Debug, Clone)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// scratch | full_ft | top_ft | mp | ra
    #[arg(long)]
    pub kind: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradArch::UdtaDesk)]
    pub arch: GradArch,
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
    /// Finite-difference step (defaults: 1e-3 in f32, 1e-5 in f64).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradArch {
    /// Desk-scale UDTA network, every parameter probed, 32-bit.
    UdtaDesk,
    /// Small graph of kink-free ops in 64-bit.
    LinearToy,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
