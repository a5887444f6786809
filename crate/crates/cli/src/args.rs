use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Least-action classifier: pools, agent training, ensembles and reports.
///
/// Relative paths resolve against `LAC_DATA_DIR` when it is set. Options
/// given as flags override the same keys in a `--config` JSON file.
#[derive(Debug, Parser)]
#[command(name = "lac", version, about)]
pub struct Cli {
    /// Seed for every random choice the command makes (default: the
    /// config file's seed, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, import, check or slice classifier pools.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Train an agent on a pool.
    TrainLac(TrainArgs),
    /// Evaluate a trained agent.
    EvalLac(EvalArgs),
    /// Gradient boosting with codeword targets.
    Boost(BoostArgs),
    /// Bagging of cross-entropy learners.
    Bag(BagArgs),
    /// Fixed-subset stacking baselines.
    Stack(StackArgs),
    /// Trajectory graphs, frequency curves, budget tables and oracles.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Router,
    Perfect,
    Overlap,
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    /// Generate a synthetic pool.
    Synth {
        /// Synthetic pool description (JSON).
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Class count for the `perfect` preset.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy an externally built manifest and tables into a pool directory.
    Import {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        tables: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a pool directory or a single table file.
    Validate {
        #[arg(long, conflicts_with = "table", required_unless_present = "table")]
        pool: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Keep only some classifiers, renumbered in the given order.
    Subset {
        #[arg(long)]
        pool: PathBuf,
        /// Comma-separated classifier ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct LossFlags {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Training configuration (JSON, keys as in the training config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Let the agent call a classifier twice.
    #[arg(long)]
    pub soft_mask: bool,
    /// 1 for a linear baseline, 2 for one hidden layer with dropout.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=2))]
    pub baseline_depth: u64,
    /// Output directory for `agent.lacag`, `metrics.csv` and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: u64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Sample classifier choices instead of taking the most likely one.
    #[arg(long)]
    pub sample: bool,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataFlags {
    /// Use the pool's train/val responses as features instead of Gaussian blobs.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub blob_classes: usize,
    #[arg(long, default_value_t = 2)]
    pub blob_dim: usize,
    #[arg(long, default_value_t = 200)]
    pub blob_per_class: usize,
    #[arg(long, default_value_t = 0.0)]
    pub blob_noise: f64,
}

#[derive(Debug, Args)]
pub struct BoostArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub shrinkage: Option<f64>,
    #[arg(long)]
    pub weight_transfer: bool,
    /// Output directory for `curve.csv`, `committee.lacgb` and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BagArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub weight_transfer: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StackArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = parse_depth)]
    pub depth: usize,
    /// `all` or comma-separated classifier ids.
    #[arg(long, conflicts_with = "best_k")]
    pub subset: Option<String>,
    /// Search every subset of this size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub best_k: Option<u64>,
    /// Use a k-nearest-neighbor vote instead of an MLP.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub knn: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Transition graph of evaluation trajectories as DOT.
    Trajectories {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch call shares from a training metrics CSV.
    Frequencies {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent per budget and tabulate test accuracy.
    Budget {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact fixed-subset and adaptive optima for small pools.
    Oracles {
        #[arg(long)]
        pool: PathBuf,
        /// Largest subset size / horizon to report.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        max_k: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_depth(s: &str) -> Result<usize, String> {
    match s {
        "3" => Ok(3),
        "5" => Ok(5),
        _ => Err(format!("depth must be 3 or 5, got {s}")),
    }
}
