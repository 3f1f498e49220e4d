//! `tvfair`: task-vector editing and subgroup fairness evaluation from the
//! command line.
//!
//! Exit status: 0 on success, 2 on invalid flags, values or config, 1 when
//! the work itself fails. Diagnostics go to stderr as `error[E_CODE]: …`.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tvfair", version, about = "Task-vector model editing with subgroup fairness evaluation")]
pub struct Cli {
    /// Worker threads for data-parallel work (default: all cores)
    #[arg(long, global = true, env = "TVFAIR_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Task vector of a fine-tuned checkpoint: task − base
    Diff(DiffArgs),
    /// Add a scaled task vector to a checkpoint: base + λ·vec
    Apply(ApplyArgs),
    /// Add several weighted task vectors to a base: base + Σ λᵢ·vecᵢ
    Merge(MergeArgs),
    /// Add a scaled subgroup vector to a fine-tuned checkpoint: sft + λ·vec
    Inject(InjectArgs),
    /// Fairness report for a prediction log
    Eval(EvalArgs),
    /// Generate a synthetic subgroup-annotated corpus
    GenData(GenDataArgs),
    /// Train the toy classifier (pooled, one subgroup, or LoRA)
    TrainToy(TrainToyArgs),
    /// Score a corpus split with a toy checkpoint
    Predict(PredictArgs),
    /// Run a coefficient sweep of merged or injected models
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DiffArgs {
    /// Fine-tuned checkpoint
    pub task: PathBuf,
    /// Base checkpoint
    pub base: PathBuf,
    /// Output task-vector checkpoint
    #[arg(short, long)]
    pub out: PathBuf,
    /// Use the common tensor names instead of failing on a mismatch
    #[arg(long)]
    pub intersect: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ApplyArgs {
    /// Checkpoint to edit
    pub base: PathBuf,
    /// Task-vector checkpoint
    pub vector: PathBuf,
    /// Scaling coefficient λ
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Output checkpoint
    #[arg(short, long)]
    pub out: PathBuf,
}

/// `path:λ`, split at the last colon.
#[derive(Debug, Clone, Serialize)]
pub struct VecArg {
    pub path: PathBuf,
    pub lambda: f64,
}

fn parse_vec_arg(s: &str) -> Result<VecArg, String> {
    let (path, lambda) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("expected <path>:<lambda>, got `{s}`"))?;
    if path.is_empty() {
        return Err(format!("missing path in `{s}`"));
    }
    let lambda: f64 = lambda
        .parse()
        .map_err(|_| format!("`{lambda}` is not a number"))?;
    if !lambda.is_finite() {
        return Err(format!("coefficient `{lambda}` is not finite"));
    }
    Ok(VecArg {
        path: path.into(),
        lambda,
    })
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    /// Base checkpoint
    pub base: PathBuf,
    /// Task vector and its coefficient; repeat for each vector (order is kept)
    #[arg(long = "vec", value_name = "PATH:LAMBDA", required = true, value_parser = parse_vec_arg, allow_hyphen_values = true)]
    pub vectors: Vec<VecArg>,
    /// Output checkpoint
    #[arg(short, long)]
    pub out: PathBuf,
    /// Merge over the common tensor names; base tensors missing from a vector are kept
    #[arg(long)]
    pub intersect: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InjectArgs {
    /// Fine-tuned checkpoint
    pub sft: PathBuf,
    /// Subgroup task-vector checkpoint
    pub worst: PathBuf,
    /// Scaling coefficient λ
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Output checkpoint
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Prediction log (JSON lines)
    #[arg(long)]
    pub preds: PathBuf,
    /// Protected attribute to group by
    #[arg(long)]
    pub attribute: String,
    /// Scores at or above this are positive (when a record has no y_pred)
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Format of the report on stdout
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Also write the report as JSON
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Also write the report as CSV
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Corpus spec (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainToyArgs {
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Train on this subgroup's examples only
    #[arg(long)]
    pub group: Option<String>,
    /// Train a low-rank adapter on a frozen base instead of all weights
    #[arg(long)]
    pub lora: bool,
    /// Adapter rank r
    #[arg(long, default_value_t = 8, requires = "lora")]
    pub rank: usize,
    /// Adapter scale α (the update is (α/r)·A·B)
    #[arg(long, default_value_t = 16.0, requires = "lora")]
    pub alpha: f64,
    /// Where to also write the adapter factors
    #[arg(long, value_name = "PATH", requires = "lora")]
    pub adapter_out: Option<PathBuf>,
    /// Start from (or, with --lora, freeze) this checkpoint instead of the seed's initial model
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    /// Seeds initialization and shuffling
    #[arg(long)]
    pub seed: u64,
    /// Passes over the training data
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Hashed feature dimension (ignored with --base)
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,
    /// Hidden width (ignored with --base)
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Output checkpoint
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Toy-model checkpoint
    pub ckpt: PathBuf,
    /// Corpus directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Corpus split to score
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output prediction log (JSON lines)
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Merge,
    Inject,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Merge all subgroup vectors into the base, or inject the worst subgroups' vectors into the fine-tuned model
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Pipeline config (.json or .toml)
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory
    #[arg(short, long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        tvfair::par::set_global_threads(n).map_err(|e| CliError::usage("E_THREADS", e))?;
    }
    match cli.command {
        Command::Diff(a) => commands::diff(a),
        Command::Apply(a) => commands::apply(a),
        Command::Merge(a) => commands::merge(a),
        Command::Inject(a) => commands::inject(a),
        Command::Eval(a) => commands::eval(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Predict(a) => commands::predict(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.exit as u8)
        }
    }
}
