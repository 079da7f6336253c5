//! Command-line surface. Every hyperparameter flag is optional so that an
//! omitted flag falls through to the config file and then to the default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "embedrank",
    version,
    about = "Train EmbedNet and rerank N-best word hypotheses"
)]
pub struct Cli {
    /// Master seed for generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory that receives every output file.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// TOML config file (same schema as the run manifest). Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for projection and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Train a projection model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Write ranked hypothesis lists for every sample.
    Rerank(RerankArgs),
    /// Word recognition accuracy of each method.
    Eval(EvalArgs),
    /// WRA as a function of the N-best list length.
    SweepK(SweepKArgs),
    /// Train one EmbedNet per margin and compare validation WRA.
    SweepMargin(SweepMarginArgs),
    /// Grid-search the confidence fusion strength on validation data.
    TuneAlpha(TuneAlphaArgs),
}

impl Command {
    /// Key of the command's table in config files and manifests.
    pub fn key(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(TrainCommand::Embednet(_)) => "train_embednet",
            Command::Train(TrainCommand::Mlp(_)) => "train_mlp",
            Command::Rerank(_) => "rerank",
            Command::Eval(_) => "eval",
            Command::SweepK(_) => "sweep_k",
            Command::SweepMargin(_) => "sweep_margin",
            Command::TuneAlpha(_) => "tune_alpha",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Triplet-loss EmbedNet with per-epoch mining.
    Embednet(TrainArgs),
    /// MSE baseline mapping image embeddings onto correct text embeddings.
    Mlp(TrainArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Training samples.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation samples.
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test samples.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Hypotheses per sample.
    #[arg(long)]
    pub k: Option<usize>,
    /// Ambient embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Latent coordinates that carry word identity.
    #[arg(long)]
    pub signal_dim: Option<usize>,
}

/// Optimizer and architecture flags shared by training commands.
#[derive(Debug, Args, Serialize)]
pub struct HyperArgs {
    /// Maximum training epochs (early stopping may end sooner).
    #[arg(long = "epochs")]
    #[serde(rename = "max_epochs")]
    pub max_epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long = "lr")]
    #[serde(rename = "learning_rate")]
    pub learning_rate: Option<f64>,
    /// Triplet margin (EmbedNet only).
    #[arg(long)]
    pub margin: Option<f64>,
    /// Triplets (or pairs) per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Smallest validation loss decrease that counts as improvement.
    #[arg(long)]
    pub min_delta: Option<f64>,
    /// Two hidden layer widths, e.g. `1024,512`.
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    /// EmbedNet output dimension.
    #[arg(long)]
    pub output_dim: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training split (JSONL).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation split used for early stopping.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CabMode {
    Off,
    On,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Crnn,
    Raw,
    Mlp,
    Embednet,
}

/// Data, model and fusion flags shared by evaluation commands.
#[derive(Debug, Args, Serialize)]
pub struct EvalCommon {
    /// Split to evaluate (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained EmbedNet model file.
    #[arg(long)]
    pub embednet: Option<PathBuf>,
    /// Trained MLP model file.
    #[arg(long)]
    pub mlp: Option<PathBuf>,
    /// Methods to report; defaults to crnn, raw and every method with a model.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MethodName>>,
    /// Fusion strength in [0, 1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Report reranking without fusion, with it, or both.
    #[arg(long, value_enum)]
    pub cab: Option<CabMode>,
    /// Trim and lowercase texts before comparing.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub normalize_text: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EvalCommon,
    /// N-best list length.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepKArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EvalCommon,
    /// K values, e.g. `1,2,3,5,10,15,20`.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    /// Split to rerank (JSONL).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// EmbedNet or MLP model; raw distances when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// N-best list length.
    #[arg(long)]
    pub k: Option<usize>,
    /// Fusion strength in [0, 1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Disable confidence fusion.
    #[arg(long)]
    #[serde(skip)]
    pub no_cab: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepMarginArgs {
    /// Training split (JSONL).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation split, for early stopping and scoring.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Margins to try, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// N-best list length for validation WRA.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneAlphaArgs {
    /// Validation split.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Distance method to fuse with confidences.
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Model file for the mlp or embednet method.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// N-best list length.
    #[arg(long)]
    pub k: Option<usize>,
    /// Alphas to try, strictly increasing, each in [0, 1).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}
