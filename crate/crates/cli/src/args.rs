use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdr_core::datasets::GENERATORS;
use sdr_core::driver::{InitMode, PrototypeCount, Task};
use sdr_core::embedding::SimilarityMode;
use sdr_core::transport::SupervisedLoss;

#[derive(Debug, Parser)]
#[command(name = "sdr", version, about = "Supervised distributional reduction", propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Fit an SDR model and write its artifacts.
    Fit(FitArgs),
    /// Embed new inputs with a fitted model's out-of-sample map.
    Project(ProjectArgs),
    /// Fit SDR, then a GP on the projected embeddings; score on test data.
    Gp(GpArgs),
    /// Fit over a grid of eta or beta values and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(GENERATORS))]
    pub dataset: String,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Noise level; each generator has its own default.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data.csv")]
    pub out: PathBuf,
}

/// Input table and column roles.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated target columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<String>,
    /// Comma-separated feature columns (default: every non-target column).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Integer class column used for homogeneity, NMI and silhouette
    /// (default: the target, for classification).
    #[arg(long)]
    pub labels: Option<String>,
}

/// Model settings. Every field left unset falls back to the config file, then
/// to the library default.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// TOML file with configuration keys (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration before running.
    #[arg(long)]
    pub dump_config: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Prototype count, or `equals-n`.
    #[arg(long)]
    pub m: Option<PrototypeCount>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub similarity: Option<SimilarityArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub outer_max: Option<usize>,
    #[arg(long)]
    pub inner_max: Option<usize>,
    #[arg(long)]
    pub outer_tol: Option<f64>,
    #[arg(long)]
    pub init: Option<InitArg>,
    /// Skip input standardization.
    #[arg(long)]
    pub no_standardize: bool,
    /// Reject T-steps that raise the full objective.
    #[arg(long)]
    pub t_step_guard: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enable the out-of-sample map.
    #[arg(long)]
    pub oos: bool,
    /// Ridge strength of the out-of-sample map.
    #[arg(long)]
    pub lambda_l: Option<f64>,
    /// Soft-update step toward the kernel-representable embedding.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Raise beta to 1 over this many final outer iterations.
    #[arg(long)]
    pub beta_ramp: Option<usize>,
    /// RBF lengthscale of the out-of-sample kernel (default: median distance).
    #[arg(long)]
    pub oos_lengthscale: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Squared,
    ModifiedCrossEntropy,
}

impl From<LossArg> for SupervisedLoss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Squared => SupervisedLoss::Squared,
            LossArg::ModifiedCrossEntropy => SupervisedLoss::ModifiedCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimilarityArg {
    StudentT,
    SqDist,
}

impl From<SimilarityArg> for SimilarityMode {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::StudentT => SimilarityMode::StudentT,
            SimilarityArg::SqDist => SimilarityMode::SqDist,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Auto,
    Spectral,
    Random,
}

impl From<InitArg> for InitMode {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Auto => InitMode::Auto,
            InitArg::Spectral => InitMode::Spectral,
            InitArg::Random => InitMode::Random,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long, default_value = "sdr-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Feature columns, when the model does not record them.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long, default_value = "projected.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// ARD-RBF GP on the standardized raw inputs.
    RawGp,
}

#[derive(Debug, Args)]
pub struct GpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Test CSV; without it a split of `--in` is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also run a comparison model and report it alongside.
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Choose the out-of-sample lengthscale by cross-validation on the training data.
    #[arg(long)]
    pub select_oos_lengthscale: bool,
    #[arg(long, default_value_t = 0.1)]
    pub gp_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub gp_steps: usize,
    #[arg(long, default_value = "gp-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Eta,
    Beta,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub param: SweepParam,
    /// Explicit grid, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "logspace")]
    pub values: Option<Vec<f64>>,
    /// Log-spaced grid `START:STOP:COUNT` over base-10 exponents.
    #[arg(long)]
    pub logspace: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Hold out this fraction for downstream kNN/KRR scores (regression with OOS).
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}
