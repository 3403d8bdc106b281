//! The `canet` command-line front end.
//!
//! Every command writes into a fresh output directory (or replaces one it
//! created earlier when given `--force`) and leaves a `manifest.json` with
//! hashes of everything it wrote. Machine-readable log records go to stdout
//! as JSON lines; a short human summary goes to stderr.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical failure,
//! 5 incompatible inputs.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::graphio::GraphError;
use crate::metrics::{EvalError, MetricError};
use crate::model::{Backbone, Method, ModelError};
use crate::numcore::NumError;
use crate::shiftgen::ShiftError;
use crate::trainer::{TrainError, DEFAULT_SEED};

pub use manifest::{sha256_file, sha256_hex, verify_manifest, RunManifest, RUN_MANIFEST};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const BEST_CONFIG_FILE: &str = "best_config.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Incompatible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Incompatible(_) => 5,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<NumError> for CliError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Incompatible(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Num(n) => n.into(),
            ModelError::Config(_) | ModelError::LayerIndex { .. } => CliError::Usage(e.to_string()),
            ModelError::Incompatible(_) => CliError::Incompatible(e.to_string()),
            ModelError::Io { .. } | ModelError::Parse(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Num(n) => n.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Incompatible(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Metric(m) => m.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Graph(g) => g.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Graph(g) => g.into(),
            TrainError::Metric(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Io { .. } | TrainError::Json { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<ShiftError> for CliError {
    fn from(e: ShiftError) -> Self {
        match e {
            ShiftError::Config(_) => CliError::Usage(e.to_string()),
            ShiftError::Graph(g) => g.into(),
            ShiftError::Num(n) => n.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "canet", version, about = "Pseudo-environment MoE graph networks for OOD node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic distribution-shift dataset.
    GenData(GenDataArgs),
    /// Train one model and write run.json plus a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences on a small instance.
    Gradcheck(GradcheckArgs),
    /// Train every grid point with every seed and pick the best config.
    Sweep(SweepArgs),
    /// Write the per-branch W_D matrices of one layer as CSV.
    ExportWeights(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    CitationSpurious,
    Planted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Canet,
    Erm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Canet => Method::Canet,
            MethodArg::Erm => Method::Erm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Gcn,
    Gat,
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Gcn => Backbone::Gcn,
            BackboneArg::Gat => Backbone::Gat,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Graph directory to add spurious features to (citation-spurious only).
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// JSON file with generator parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Nodes per environment (planted only).
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub spurious_dim: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with training-config fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[arg(long)]
    pub force: bool,
}

/// Flags that override individual training-config fields.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    /// Number of propagation layers.
    #[arg(long = "L")]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Number of branches.
    #[arg(long = "K")]
    pub branches: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Drop the KL regularizer from the loss.
    #[arg(long)]
    pub no_reg_loss: bool,
    /// One environment estimator shared by every layer.
    #[arg(long)]
    pub shared_env: bool,
    /// Uniform gates instead of the learned estimator.
    #[arg(long)]
    pub mean_pool_env: bool,
    /// Perturb log π rather than π in the Gumbel-Softmax.
    #[arg(long)]
    pub log_prob_gumbel: bool,
    /// Noise-free gates at evaluation.
    #[arg(long)]
    pub deterministic_eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "gcn")]
    pub backbone: BackboneArg,
    #[arg(long = "K", default_value_t = 3)]
    pub branches: usize,
    #[arg(long = "L", default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Deliberately break one gradient rule.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file mapping hyperparameter names to value lists.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Base training config the grid is applied on.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 1-based layer index.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Runs an already parsed command line. `args` is recorded in manifests.
pub fn run(cli: Cli, args: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, args),
        Command::Train(a) => commands::train(a, args),
        Command::Eval(a) => commands::eval(a, args),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a, args),
        Command::ExportWeights(a) => commands::export_weights(a, args),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, &args[1.min(args.len())..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
