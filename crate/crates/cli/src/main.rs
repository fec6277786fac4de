use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Train, evaluate and inspect the convolutional-recurrent attention
/// text classifier.
#[derive(Debug, Parser)]
#[command(name = "attnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus with planted class keywords.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus training history.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Classify raw text, one JSON object per input.
    Predict(PredictArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub docs_per_class: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single labeled JSONL file, split into train/validation/test.
    #[arg(long, conflicts_with_all = ["train", "val", "test"])]
    pub data: Option<PathBuf>,
    /// Pre-split training file (requires --val).
    #[arg(long, requires = "val")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub val: Option<PathBuf>,
    /// Pre-split test file. Recorded only; training never opens it.
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_model: Option<PathBuf>,
    /// Training history JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Pretrained vectors in word2vec text format.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Write the train/val/test splits of --data here as JSONL.
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for both weight initialisation and batch shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Another model's saved predictions on the same data; adds McNemar's test.
    #[arg(long)]
    pub compare_preds: Option<PathBuf>,
    /// Write this model's predictions as JSONL.
    #[arg(long)]
    pub save_preds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "stdin_jsonl", required_unless_present = "stdin_jsonl")]
    pub text: Option<String>,
    /// Read `{"text": ...}` objects from standard input, one per line.
    #[arg(long)]
    pub stdin_jsonl: bool,
    #[arg(long)]
    pub show_attention: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Test hook: break the tanh derivative so the suite must fail.
    #[arg(long, hide = true)]
    pub corrupt_tanh_grad: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] attnet::Error),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    /// 0 ok, 1 usage/config, 2 data/format/io, 3 verification failure.
    pub fn exit_code(&self) -> u8 {
        use attnet::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(E::Config { .. } | E::Contract(_)) => 1,
            CliError::Lib(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

/// Every input file is announced on stderr so tests can audit access.
pub fn log_open(path: &Path) {
    eprintln!("open {}", path.display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
