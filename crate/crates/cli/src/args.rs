// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pti", version, about = "Prefill-time KV-cache steering experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random weights file.
    InitModel(InitModel),
    /// Write a synthetic grounding dataset for a model.
    MakeSynth(MakeSynth),
    /// Extract steering directions from a synthetic dataset's contrast pairs.
    Extract(Extract),
    /// Prefill, optionally intervene, then decode.
    Generate(Generate),
    /// Stage-wise visual attention and object-attention shift of two traces.
    Analyze(Analyze),
    /// CHAIR and POPE scores from JSONL record files.
    Eval(Eval),
    /// Decode latency with and without the intervention.
    Bench(Bench),
    /// Lambda grid search on a synthetic dataset, scored by mean S_obj.
    Grid(Grid),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InitModel {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub head_dim: usize,
    #[arg(long)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct MakeSynth {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON task config; the flags below are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub visual_tokens: usize,
    #[arg(long, default_value_t = 0.25)]
    pub object_fraction: f64,
    #[arg(long, default_value_t = 6)]
    pub prompt_length: usize,
    #[arg(long, default_value_t = 3.0)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shared_fraction: f64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct Extract {
    #[arg(long)]
    pub model: PathBuf,
    /// Synthetic dataset whose samples supply the contrast pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Rank of the PCA denoising; plain mean when omitted.
    #[arg(long)]
    pub pca_rank: Option<usize>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyName {
    Greedy,
    Beam,
    Nucleus,
}

/// Intervention source shared by `generate` and `bench`.
#[derive(Debug, Args)]
pub struct InterventionArgs {
    /// Steering directions file.
    #[arg(long, conflicts_with = "no_intervention")]
    pub directions: Option<PathBuf>,
    /// JSON intervention config.
    #[arg(long, requires = "directions", conflicts_with_all = ["lambda_k", "lambda_v"])]
    pub config: Option<PathBuf>,
    /// Tied key coefficient for both modalities.
    #[arg(long, requires = "directions")]
    pub lambda_k: Option<f64>,
    /// Tied value coefficient for both modalities.
    #[arg(long, requires = "directions")]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub no_intervention: bool,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence document, or a synthetic dataset together with `--sample`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, value_enum, default_value_t = StrategyName::Greedy)]
    pub strategy: StrategyName,
    #[arg(long, default_value_t = 5)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    /// Attention trace CSV; not available with beam search.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct Analyze {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Sequence document for the visual index set. Defaults to the segment
    /// file written next to the `--before` trace.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON 0/1 array over the visual tokens; enables the object-shift heatmap.
    #[arg(long, requires = "heatmap")]
    pub mask: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-9)]
    pub epsilon: f64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("records").required(true).multiple(true).args(["chair", "pope"]))]
pub struct Eval {
    /// JSONL of {"mentioned_objects": [...], "ground_truth_objects": [...]}.
    #[arg(long)]
    pub chair: Option<PathBuf>,
    /// JSONL of {"prediction": "yes"|"no", "label": "yes"|"no"}.
    #[arg(long)]
    pub pope: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct Bench {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 7)]
    pub runs: usize,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct Grid {
    #[arg(long)]
    pub model: PathBuf,
    /// Synthetic dataset the candidates are scored on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub directions: PathBuf,
    /// JSON grid spec; the default is {0, 0.1, ..., 1}^2.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    /// Also write the winning config as JSON.
    #[arg(long)]
    pub best: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}
