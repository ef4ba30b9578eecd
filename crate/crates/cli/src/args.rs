use std::path::PathBuf;

use bhg::blocks::BlockKind;
use bhg::experiments::Suite;
use bhg::graph::PoolKind;
use bhg::nets::NetworkSpec;
use bhg::train::LossKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bhg", version, about = "Binarized hourglass networks for landmark localization")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print parameter counts of full-size networks.
    CountParams(CountArgs),
    /// Train a network and write the model file and a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a model file; writes report.json, report.csv and curve.svg.
    Eval(EvalArgs),
    /// Packed XNOR-popcount GEMM against the naive float GEMM.
    Bench(BenchArgs),
    /// Write a model file and print its compression against the all-real form.
    Export(ExportArgs),
    /// Read a model file, verify it and check that it re-exports identically.
    Import(ImportArgs),
    /// Run a desk-scale ablation suite on synthetic data.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    L2,
    Bce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L2 => LossKind::PixelL2,
            LossArg::Bce => LossKind::SigmoidBce,
        }
    }
}

fn parse_block(s: &str) -> Result<BlockKind, String> {
    let b: BlockKind = s.parse().map_err(|e: bhg::Error| e.to_string())?;
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// bottleneck, wider, ms, ms_no1x1, hpm, hpm_reduced, hpm_depth:<d> or hpm_card:<c>.
    #[arg(long, default_value = "hpm", value_parser = parse_block)]
    pub block: BlockKind,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub stacks: u64,
    /// Identity skip branches with concatenating merges.
    #[arg(long)]
    pub improved: bool,
    /// Binary convolutions (the default).
    #[arg(long, overrides_with = "real")]
    pub binary: bool,
    /// Real-valued convolutions throughout.
    #[arg(long, overrides_with = "binary")]
    pub real: bool,
    #[arg(long)]
    pub relu_after_conv: bool,
    #[arg(long, value_enum, default_value_t = PoolArg::Max)]
    pub pool: PoolArg,
}

impl NetArgs {
    /// Applies the flags to a base configuration.
    pub fn apply(&self, mut spec: NetworkSpec) -> NetworkSpec {
        spec.stacks = self.stacks as usize;
        spec.improved = self.improved;
        spec.binary = !self.real;
        spec.relu_after_conv = self.relu_after_conv;
        spec.pool = match self.pool {
            PoolArg::Max => PoolKind::Max,
            PoolArg::Avg => PoolKind::Avg,
        };
        spec
    }

    pub fn full_spec(&self) -> NetworkSpec {
        self.apply(NetworkSpec::full(self.block))
    }

    pub fn desk_spec(&self, num_outputs: usize) -> NetworkSpec {
        self.apply(NetworkSpec::desk(self.block, num_outputs))
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Generate synthetic stick-figure data instead of reading a manifest.
    #[arg(long)]
    pub synthetic: bool,
    /// Synthetic: number of samples.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Synthetic: image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Synthetic: number of joints (at most 16).
    #[arg(long, default_value_t = 16)]
    pub parts: usize,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Print every block and network configuration.
    #[arg(long)]
    pub table2: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation manifest (defaults to fresh synthetic data with --synthetic).
    #[arg(long)]
    pub val_dataset: Option<PathBuf>,
    /// Synthetic: number of validation samples.
    #[arg(long, default_value_t = 64)]
    pub val_samples: usize,
    /// Full-size network instead of the small desk configuration.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub joint_epochs: usize,
    /// Multiplies all epoch counts.
    #[arg(long, default_value_t = 1.0)]
    pub epoch_scale: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Bce)]
    pub loss: LossArg,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "bhg-train")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value = "bhg-eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Square matrix side.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Minimum timing window per kernel, milliseconds.
    #[arg(long, default_value_t = 300)]
    pub min_ms: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Re-export an existing model file; otherwise a freshly initialized
    /// network is built from the network flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    /// Desk-size network instead of the full-size one.
    #[arg(long)]
    pub desk: bool,
    #[arg(long, default_value_t = 16)]
    pub parts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.bhg")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// Model file.
    pub path: PathBuf,
    /// Random inputs used for the forward check.
    #[arg(long, default_value_t = 10)]
    pub inputs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    pub suite: Suite,
    /// Number of paired seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the protocol's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub epoch_scale: f64,
    /// Overrides the protocol's training-set size.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Writes report.json and report.csv (and curve.svg for depth) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
