use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stackqa", version, about = "Answer-ensembling pipeline for extractive QA n-best lists")]
pub struct Cli {
    /// Worker threads for per-question work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Also write a machine-readable JSON report to this path.
    #[arg(long, global = true, value_name = "PATH")]
    pub json: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score final answers against ground truth.
    Eval(EvalArgs),
    /// Best-of-top-N scores for one or more n-best files.
    Topn(TopnArgs),
    /// Best-of-top-N over the pooled hypotheses of several models.
    Oracle(OracleArgs),
    /// Combine n-best lists with a voting method.
    Vote(VoteArgs),
    /// Encode n-best lists into level-1 examples (JSONL).
    DatasetBuild(DatasetBuildArgs),
    /// Train the meta-model.
    Train(TrainArgs),
    /// Pick answers with a trained meta-model.
    Predict(PredictArgs),
    /// Generate synthetic ground truth and n-best files.
    Synth(SynthArgs),
    /// Finite-difference check of the meta-model gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSON ({qid: answer}).
    #[arg(long)]
    pub pred: PathBuf,
    /// SQuAD v2 ground truth.
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Args)]
pub struct TopnArgs {
    /// n-best JSON; repeat for several models.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub gold: PathBuf,
    /// Comma-separated, strictly ascending.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub ns: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    /// One of 1, 2, 3, 3p, 4, 5, 6, 7, 8, 8p.
    #[arg(long)]
    pub method: String,
    /// Hypotheses per model for the top-N methods.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground truth; restricts questions to its ids and prints scores.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// n-best JSON per model, in slot order.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground truth; without it examples carry no targets.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse an existing vocabulary.
    #[arg(long, conflicts_with = "save_tokenizer", required_unless_present = "save_tokenizer")]
    pub tokenizer: Option<PathBuf>,
    /// Build the vocabulary from these lists and write it here.
    #[arg(long)]
    pub save_tokenizer: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n_per_model: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens_per_hypothesis: usize,
    #[arg(long, default_value_t = 30)]
    pub max_answer_length: usize,
    /// Score hypotheses whose answerability disagrees with the question as −1.
    #[arg(long)]
    pub biased: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training examples (JSONL with targets).
    #[arg(long)]
    pub train: PathBuf,
    /// Dev examples used for model selection.
    #[arg(long)]
    pub dev: PathBuf,
    /// Dev ground truth.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long, env = "STACKQA_SEED")]
    pub seed: u64,
    /// JSON model config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    /// Hidden FC sizes followed by the slot count, e.g. 64,16.
    #[arg(long, value_delimiter = ',')]
    pub fc_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub embed_dropout: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// conventional or literal-paper.
    #[arg(long)]
    pub kl_direction: Option<String>,
    #[arg(long)]
    pub biased_targets: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Examples to answer (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth; prints scores when given.
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = "STACKQA_SEED")]
    pub seed: u64,
    /// JSON generator config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub questions: Option<usize>,
    /// `id:top1_accuracy:topn_recall:n`; repeat per model.
    #[arg(long)]
    pub model: Vec<String>,
    #[arg(long)]
    pub unanswerable_fraction: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub miss_correlation: Option<f64>,
    #[arg(long)]
    pub false_abstention_rate: Option<f64>,
    #[arg(long)]
    pub short_list_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, env = "STACKQA_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Examples in the checked batch.
    #[arg(long, default_value_t = 3)]
    pub examples: usize,
}
