use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "grove",
    version,
    about = "Grove MoE layer: simulation, accounting and verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Naive,
    Dedup,
}

/// Where a layer comes from: a checkpoint, or a fresh random layer built
/// from a config file (desk defaults when neither is given).
#[derive(Debug, Args)]
pub struct LayerSource {
    /// Checkpoint to load.
    #[arg(long, conflicts_with = "config")]
    pub ckpt: Option<PathBuf>,
    /// Config file (flat TOML with GroveConfig keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized plain-MoE or Grove checkpoint.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a plain MoE layer (no adjugates).
        #[arg(long)]
        plain: bool,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upcycle a plain-MoE checkpoint into a function-preserving Grove layer.
    Upcycle {
        /// Source plain-MoE checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Grove hyperparameters; d, n, k, m must match the source.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Group count override.
        #[arg(long)]
        groups: Option<usize>,
        /// Adjugate scaling override.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-encode a checkpoint, optionally changing its storage dtype.
    Save {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a checkpoint and print its summary.
    Load {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run random tokens through a layer and write per-token outputs.
    Forward {
        #[command(flatten)]
        source: LayerSource,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, value_enum, default_value = "dedup")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of adjugate evaluations per token over a random stream.
    SimulateRouting {
        #[command(flatten)]
        source: LayerSource,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Output directory for routing_report.json and routing_histogram.csv.
        #[arg(long)]
        out: PathBuf,
        /// Format of the summary printed to stdout.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Closed-loop load-balancing simulation on skewed logits.
    SimulateBalance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Logit offset added to the first k experts.
        #[arg(long, default_value_t = grove_core::balance::SCENARIO_SKEW)]
        skew: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Bias update rate override.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the analytic backward pass with central finite differences.
    Gradcheck {
        #[command(flatten)]
        source: LayerSource,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        /// Coordinates sampled per tensor (0 checks every coordinate).
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Negative control: drop the router gradient before checking.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Fit a random linear map with gradient descent plus bias balancing.
    TrainToy {
        #[command(flatten)]
        source: LayerSource,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        lr: Option<f64>,
        /// Output directory for loss.csv and final.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting for a config or checkpoint.
    Stats {
        #[command(flatten)]
        source: LayerSource,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
}
