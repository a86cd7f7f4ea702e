//! `clonegrade` command-line pipeline.
//!
//! Stages communicate through files on disk: curate → featurize →
//! import-embeddings → train-prior → train-fusion → predict → arbitrate →
//! evaluate. Each run writes a manifest next to its outputs.
//!
//! Exit codes: 0 success, 1 pipeline error, 2 usage error. Failures print a
//! single JSON line `{"error": "usage"|"pipeline", "message": ...}` on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod config;
pub mod manifest;
mod stages;

pub use stages::PredictionRow;

/// A usage error (bad flag, missing input, config conflict). Exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "clonegrade", version, about = "Seven-class code clone grading pipeline")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, deduplicate and split a raw corpus by project.
    Curate(CurateArgs),
    /// Compute lexical and structural feature caches.
    Featurize(FeaturizeArgs),
    /// Validate and normalize an embedding store (TFEM or JSON lines).
    ImportEmbeddings(ImportArgs),
    /// Fit the heuristic prior on the training split and cache its output.
    TrainPrior(TrainPriorArgs),
    /// Train the fusion head.
    TrainFusion(TrainFusionArgs),
    /// Predict a split with a trained checkpoint.
    Predict(PredictArgs),
    /// Escalate low-confidence predictions to an arbiter.
    Arbitrate(ArbitrateArgs),
    /// Score predictions or decisions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long, value_name = "FILE")]
    pub fragments: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "train-cap-0")]
    pub train_cap_0: Option<usize>,
    #[arg(long = "train-cap-6")]
    pub train_cap_6: Option<usize>,
    #[arg(long)]
    pub val_target: Option<usize>,
    #[arg(long)]
    pub min_chars: Option<usize>,
    /// Sample the label-6 cap uniformly instead of by diversity.
    #[arg(long)]
    pub no_diversity: bool,
    #[arg(long)]
    pub diversity_bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Output directory of `curate`.
    #[arg(long, value_name = "DIR")]
    pub curated: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Trees larger than this use the fingerprint approximation of TED.
    #[arg(long)]
    pub ted_node_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// `.tfem` store or JSON lines `{"fragment_id","vector"}`.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Expected embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Pooling tag for JSON-lines input: cls, mean or max.
    #[arg(long)]
    pub pooling: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[arg(long, value_name = "DIR")]
    pub curated: PathBuf,
    /// Output directory of `featurize`.
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// gbdt or softmax_regression.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

/// Inputs shared by `train-fusion` and `predict`.
#[derive(Debug, Args)]
pub struct FusionInputs {
    #[arg(long, value_name = "DIR")]
    pub curated: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Output directory of `train-prior`.
    #[arg(long, value_name = "DIR")]
    pub prior: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub embeddings: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainFusionArgs {
    #[command(flatten)]
    pub inputs: FusionInputs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long = "smoothing")]
    pub label_smoothing: Option<f64>,
    #[arg(long = "d-k")]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub inputs: FusionInputs,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArbitrateArgs {
    /// `predictions.jsonl` from `predict`.
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// Output directory of `curate`, for the fragment sources.
    #[arg(long, value_name = "DIR")]
    pub curated: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// off, all, label5 or labels2345.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Replay verdicts from a JSON object keyed by pair id.
    #[arg(long, value_name = "FILE")]
    pub mock: Option<PathBuf>,
    /// Chat-completion endpoint. The bearer key is read from ARBITER_API_KEY.
    #[arg(long)]
    pub arbiter_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub retries: Option<usize>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub per_minute: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `decisions.jsonl` from `arbitrate`.
    #[arg(long, value_name = "FILE")]
    pub decisions: Option<PathBuf>,
    /// `predictions.jsonl` from `predict`; adds top-k coverage.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Pair manifest(s) holding the true labels.
    #[arg(long, value_name = "FILE", required = true)]
    pub truths: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Comma-separated confidence bin edges, e.g. 0,0.6,0.8,1.0.
    #[arg(long)]
    pub bins: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub confusion_csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.render().to_string());
            return 2;
        }
    };
    match stages::execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => match e.downcast_ref::<UsageError>() {
            Some(u) => {
                report_error("usage", &u.0);
                2
            }
            None => {
                report_error("pipeline", &format!("{e:#}"));
                1
            }
        },
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message.trim_end()}));
}
