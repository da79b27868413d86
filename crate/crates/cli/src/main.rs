//! `lrnet`: gradient checks, cost reports, benchmarks, training, evaluation and prior export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::LrOverrides;

/// Exit status classes: 1 for failed checks or runtime errors, 2 for bad usage.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Runtime(lrnet::Error),
}

impl From<lrnet::Error> for Failure {
    fn from(e: lrnet::Error) -> Self {
        match e {
            lrnet::Error::Config(m) => Failure::Usage(m),
            e @ lrnet::Error::UnknownLayer(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "lrnet", version, about = "Local relation networks on the CPU")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON run configuration; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// resnet18 | resnet26 | resnet50 | lr18 | lr26 | lr50
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub kernel_size: Option<usize>,
    /// Channels sharing one aggregation weight (m).
    #[arg(long, global = true)]
    pub channel_share: Option<usize>,
    /// sqdiff | absdiff | mul
    #[arg(long, global = true)]
    pub variant: Option<String>,
    #[arg(long, global = true)]
    pub qk_dim: Option<usize>,
    /// network | direct | off
    #[arg(long, global = true)]
    pub geo: Option<String>,
    /// softmax | none
    #[arg(long, global = true)]
    pub norm: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores; gradcheck always uses one).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

impl GlobalArgs {
    pub fn lr_overrides(&self) -> LrOverrides {
        LrOverrides {
            kernel: self.kernel_size,
            channels_per_group: self.channel_share,
            variant: self.variant.clone(),
            qk_dim: self.qk_dim,
            geo: self.geo.clone(),
            norm: self.norm.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MutationArg {
    NegateThetaG,
    DropQkPath,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of the local relation backward pass.
    Gradcheck {
        /// Corrupt the analytic gradients (checker self-test).
        #[arg(long, value_enum)]
        mutate: Option<MutationArg>,
        /// Print the full report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Per-layer parameter and FLOP report.
    Flops {
        /// Network description file instead of --model.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Fail unless totals match the published size of the preset.
        #[arg(long)]
        assert_paper: bool,
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time the reference and optimized kernels and a 3×3 convolution of equal cost.
    Bench {
        /// NxCxHxW
        #[arg(long, default_value = "2x64x28x28")]
        shape: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_value = "reference,optimized,conv3x3")]
        kernels: Vec<String>,
    },
    /// Train with per-epoch metrics and checkpoints.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        base_lr: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a local relation layer's prior logits and their softmax as CSV.
    ExportPrior {
        /// Checkpoint to read; without one, a freshly initialized network is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// CIFAR-10 binary directory; selects CIFAR-10 data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub val_subset: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}
