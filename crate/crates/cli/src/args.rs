use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rml::data::Encoding;
use rml::fusion::FusionConfig;
use rml::tasks::LossKind;
use rml::train::lambda_presets;
use rml::Normalization;

#[derive(Debug, Parser)]
#[command(name = "rml", version, about = "Robust multi-view representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised training of the fusion network.
    Train(TrainArgs),
    /// K-Means on the fused representations of a trained model.
    Cluster(ClusterArgs),
    /// Classification with optionally corrupted training labels.
    Classify(ClassifyArgs),
    /// Writes a synthetic blobs dataset and its manifest.
    Synth(SynthArgs),
    /// Finite-difference check of every training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Component {
    /// Attention (tokens pass through unchanged).
    Atten,
    /// Noise-perturbed branch (fed the clean batch).
    Np,
    /// Unusable-perturbed branch (fed the clean batch).
    Mp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Mce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::Ce,
            LossArg::Mce => LossKind::Mce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    None,
    Zscore,
    Minmax,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::None => Normalization::None,
            NormArg::Zscore => Normalization::Zscore,
            NormArg::Minmax => Normalization::Minmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    Csv,
    F32,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Csv => Encoding::Csv,
            EncodingArg::F32 => Encoding::F32Le,
        }
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset manifest.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    pub data: Option<PathBuf>,
    /// Use the default synthetic blobs dataset, generated from --seed.
    #[arg(long)]
    pub synth: bool,
    /// Input normalization, used when the manifest does not set one.
    #[arg(long, value_enum, default_value = "zscore")]
    pub normalize: NormArg,
}

/// Settings shared by every command that trains a fusion network.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Noise ratio: probability that a (sample, view) cell gets noise.
    #[arg(long, default_value_t = 0.25)]
    pub p: f64,
    /// Unusable ratio: fraction of samples that lose views.
    #[arg(long, default_value_t = 0.25)]
    pub r: f64,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    /// Contrastive temperature.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Mini-batch size (default min(256, N)).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Token width.
    #[arg(long = "d-e", default_value_t = FusionConfig::DEFAULT_DIM)]
    pub d_e: usize,
    /// Fused representation width.
    #[arg(long, default_value_t = FusionConfig::DEFAULT_DIM)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Disable a component; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Component>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss file to write (`step loss` per line).
    #[arg(long = "loss-trace")]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of clusters (default: the dataset's class count).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append `metric=... value=...` lines to this file.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fraction of training labels replaced by uniformly drawn classes.
    #[arg(long = "noise-rate", default_value_t = 0.0)]
    pub noise_rate: f64,
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossArg,
    /// Weight of the alignment term.
    #[arg(long, default_value_t = lambda_presets::GENERAL)]
    pub lambda: f64,
    /// Fraction of every class used for training.
    #[arg(long, default_value_t = 0.7)]
    pub split: f64,
    /// Append `metric=... value=...` lines to this file.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory; receives `manifest.toml` and one file per view.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Comma-separated view widths.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 10])]
    pub dims: Vec<usize>,
    /// Blob standard deviation: one value, or one per view.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0])]
    pub spread: Vec<f64>,
    /// Minimum distance between class centers within a view.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub encoding: EncodingArg,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
