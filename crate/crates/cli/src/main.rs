//! `docvqa` — synthetic corpus generation, two-stage training, evaluation,
//! single-question answering, scorer grid sweeps and result reports.
//!
//! ```bash
//! docvqa gen --seed 7 --docs 200 --pages 4:8 --out corpus/
//! docvqa train-vqa --data corpus/ --out runs/stage1
//! docvqa train-scorer --data corpus/ --checkpoint runs/stage1/checkpoint.ckpt --out runs/stage2
//! docvqa eval --checkpoint runs/stage2/checkpoint.ckpt --data corpus/test --out runs/eval
//! docvqa answer --checkpoint runs/stage2/checkpoint.ckpt --doc corpus/test/doc0003 \
//!     --question "what is the value of AB?"
//! docvqa sweep --checkpoint runs/stage1/checkpoint.ckpt --data corpus/ --layers 1:4 --heads 2,4,8,16 --out runs/sweep
//! docvqa report --results runs/eval/results.jsonl
//! ```
//!
//! Exit status: 0 on success, 2 for usage errors (bad flags, missing
//! paths), 1 for failures while running.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docvqa::Aggregation;

#[derive(Parser, Debug)]
#[command(name = "docvqa", version, about = "OCR-free multi-page document VQA")]
pub struct Cli {
    /// Worker threads for evaluation and batch gradients (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic key-value corpus split into train/valid/test
    Gen(GenArgs),
    /// Stage 1: train the encoder-decoder on evidence pages
    TrainVqa(TrainVqaArgs),
    /// Stage 2: freeze the model and train the page scorer
    TrainScorer(TrainScorerArgs),
    /// Evaluate a stage-2 checkpoint on a split directory
    Eval(EvalArgs),
    /// Answer one question about one document directory
    Answer(AnswerArgs),
    /// Train and evaluate scorers over a layers x heads grid
    Sweep(SweepArgs),
    /// Quadrant table and page histogram from a results file
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// TOML configuration file ([synth] and [split] sections)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of documents
    #[arg(long)]
    pub docs: Option<usize>,
    /// Pages per document, `min:max`
    #[arg(long, value_parser = config::parse_range)]
    pub pages: Option<(usize, usize)>,
    /// Fact lines per page
    #[arg(long)]
    pub facts: Option<usize>,
    /// Questions per document
    #[arg(long)]
    pub questions: Option<usize>,
    /// Train/valid/test document fractions, e.g. `0.8,0.1,0.1`
    #[arg(long, value_parser = config::parse_fractions)]
    pub split: Option<[f64; 3]>,
    /// Seed of the document split (defaults to the generator seed)
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Write one unsplit `all/` directory instead of train/valid/test
    #[arg(long)]
    pub no_split: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// `sgd` or `adam`
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainVqaArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus root holding `train/` and `valid/`
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub model_heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    /// Seed of the parameter initialization
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ScorerFlags {
    /// Self-attention layers in the scorer
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads in the scorer
    #[arg(long)]
    pub heads: Option<usize>,
    /// `first_vector`, `cls_token` or `adaptive_avg_pool`
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Label smoothing of the regression targets
    #[arg(long)]
    pub eps: Option<f64>,
    /// Seed of the scorer initialization
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainScorerArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 (or stage-2) checkpoint supplying the frozen model
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub scorer: ScorerFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory (`annotations.json` + `images/`)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnswerArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of page images, ordered by name (numbers compare numerically)
    #[arg(long)]
    pub doc: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Print the per-page scores as well
    #[arg(long)]
    pub scores: bool,
}

/// A whole `1:4` / `2,4,8` list parsed from one flag value. The alias keeps
/// clap from treating the field as a repeated single-number flag.
pub type CountList = Vec<usize>;

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scorer layer counts, e.g. `1:4`
    #[arg(long, value_parser = config::parse_list, default_value = "1:4")]
    pub layers: CountList,
    /// Scorer head counts, e.g. `2,4,8,16`
    #[arg(long, value_parser = config::parse_list, default_value = "2,4,8,16")]
    pub heads: CountList,
    /// Split evaluated for every cell
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Aggregation used in every cell
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Results file written by `eval`
    #[arg(long)]
    pub results: PathBuf,
    /// Also write `report.json` and `report.txt` here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure caused by how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
