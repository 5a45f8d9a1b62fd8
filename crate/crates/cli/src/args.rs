use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "pecl-lab",
    version,
    about = "Soft kNN contrastive regularisation experiments for species encounter-rate prediction"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON or TOML experiment config (`.toml` by extension, JSON otherwise).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, env = "PECL_LAB_SEED")]
    pub seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Parallel worker slots for seeds and search candidates.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Observation records to per-location encounter-rate labels.
    Prep(PrepArgs),
    /// DBSCAN clustering and cluster-aware train/val/test assignment.
    Split(SplitArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train over all seeds and report metrics against the mean-rate baseline.
    Train(TrainArgs),
    /// Grid or random hyperparameter search.
    Search(SearchArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Score a saved checkpoint on one split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// `location_id,lon,lat` or `location_id,x_m,y_m`.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Minimum observations per kept location.
    #[arg(long)]
    pub min_obs: Option<usize>,
    /// Number of species; defaults to the largest species id plus one.
    #[arg(long)]
    pub species: Option<usize>,
    /// Skip malformed rows instead of aborting.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Clustering radius in metres.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Train, validation and test fractions, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_locations: Option<usize>,
    #[arg(long)]
    pub species: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub habitats: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write features.bin.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// features.csv or features.bin.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Only fit and score the mean-rate baseline.
    #[arg(long)]
    pub baseline_only: bool,
    /// Training seeds, comma separated; overrides --seed and the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchMode {
    Grid,
    Random,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub mode: Option<SearchMode>,
    /// Random-search candidates to draw.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per suite.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Largest batch size drawn.
    #[arg(long)]
    pub max_batch: Option<usize>,
    /// Largest embedding dimension drawn.
    #[arg(long)]
    pub max_dim: Option<usize>,
    /// Largest species count drawn.
    #[arg(long)]
    pub max_species: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: EvalSplit,
}
