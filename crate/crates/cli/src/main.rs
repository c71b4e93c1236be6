//! `s3`: synthesize a seed dataset with an LLM, grow it by extrapolating a
//! small model's errors, and measure the result.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "s3", version, about = "LLM-driven dataset synthesis with error extrapolation")]
pub struct Cli {
    /// Directory that receives every output file and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true, default_value_t = 4)]
    pub parallel: usize,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a seed dataset for a task.
    SynthesizeSeed(SynthesizeArgs),
    /// Grow a seed dataset by extrapolating validation errors.
    RunEes(EesArgs),
    /// Score predictions (or a model trained on a dataset) against gold data.
    Evaluate(EvaluateArgs),
    /// Quality of added data and coverage of the gold data.
    #[command(subcommand)]
    Diversity(DiversityCommand),
    /// Run the mixture-gap simulator on a scenario file.
    SimulateGap(GapArgs),
    /// Fine-tuning cost in FLOPs.
    Flops(FlopsArgs),
    /// Run the bundled offline scenario end to end.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Args, Serialize)]
pub struct LlmArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    pub backend: BackendKind,
    /// Oracle script for the scripted backend.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Model name sent to the remote backend.
    #[arg(long, default_value = "gpt-3.5-turbo")]
    pub model: String,
    /// Response cache file (JSON lines, appended to).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: u32,
    /// Reject prompts estimated above this many tokens; 0 disables the check.
    #[arg(long, default_value_t = 4096)]
    pub max_prompt_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    BuiltinNb,
    External,
}

#[derive(Args, Serialize)]
pub struct TrainerArgs {
    #[arg(long = "trainer", value_enum, default_value = "builtin-nb")]
    pub kind: TrainerKind,
    /// Additive smoothing for the builtin classifier.
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    /// Command line of the external trainer, split on whitespace.
    #[arg(long)]
    pub trainer_cmd: Option<String>,
    /// JSON object of hyperparameters forwarded to the external trainer.
    #[arg(long)]
    pub trainer_config: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value = "seed.jsonl")]
    pub out: PathBuf,
    /// Context pool (JSON lines of {context, answer?}) for pair and QA tasks.
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Cycle through labels instead of sampling them.
    #[arg(long)]
    pub balance: bool,
    /// Use every context once before reusing any.
    #[arg(long)]
    pub epoch_contexts: bool,
    /// Keep completions as returned (only trimmed).
    #[arg(long)]
    pub no_echo_strip: bool,
    /// Redraws allowed for failed generations.
    #[arg(long)]
    pub retry_budget: Option<usize>,
    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Args, Serialize)]
pub struct EesArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Seed dataset.
    #[arg(long)]
    pub seed: PathBuf,
    #[arg(long)]
    pub gold_val: PathBuf,
    /// Scored every round, never used for decisions.
    #[arg(long)]
    pub gold_test: Option<PathBuf>,
    /// Overrides the task's round count.
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, default_value = "train.jsonl")]
    pub out: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    /// New examples per validation error.
    #[arg(long, default_value_t = 1)]
    pub expansion: usize,
    /// Stop when the validation metric gains less than this.
    #[arg(long, default_value_t = 0.005)]
    pub min_improvement: f64,
    #[arg(long)]
    pub no_convergence: bool,
    /// Generation attempts per new example.
    #[arg(long, default_value_t = 3)]
    pub attempts: u32,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[command(flatten)]
    pub trainer: TrainerArgs,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions as JSON lines of {id, label|answer, score?}.
    #[arg(long, conflicts_with = "train", required_unless_present = "train")]
    pub pred: Option<PathBuf>,
    /// Train a model on this dataset and score it instead.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub trainer: TrainerArgs,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityCommand {
    /// Compare added examples with the errors they came from.
    Quality(QualityArgs),
    /// Fraction of gold points near some synthetic point in 2-D.
    Coverage(CoverageArgs),
}

#[derive(Args, Serialize)]
pub struct QualityArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Misclassified examples.
    #[arg(long)]
    pub mis: PathBuf,
    /// Added examples, linked by source_error_id.
    #[arg(long)]
    pub add: PathBuf,
    /// Precomputed embeddings (JSON lines of {id, vector}); hashed
    /// bag-of-words when omitted.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value = "quality.json")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub syn: PathBuf,
    #[arg(long, conflicts_with = "coords")]
    pub embeddings: Option<PathBuf>,
    /// Precomputed 2-D coordinates (JSON lines of {id, x, y}).
    #[arg(long)]
    pub coords: Option<PathBuf>,
    /// Coverage radius; median gold nearest-neighbour distance by default.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Randomly keep at most this many points of each set.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "coverage.json")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct GapArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// CSV trace; a JSON trace is written next to it.
    #[arg(long, default_value = "trace.csv")]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct FlopsArgs {
    /// Parameter count, e.g. 66e6.
    #[arg(long)]
    pub params: f64,
    #[arg(long)]
    pub seq_len: f64,
    /// RECORDS:EPOCHS, e.g. 200k:10. Repeatable.
    #[arg(long = "stage", required = true)]
    pub stages: Vec<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub rounds: usize,
    #[arg(long, default_value_t = 1)]
    pub expansion: usize,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let cat = s3_core::ErrorCategory::Config;
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[{cat}]: {first}");
            return ExitCode::from(cat.exit_code() as u8);
        }
    };
    let level = cli.log_level.parse().unwrap_or(log::LevelFilter::Warn);
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{cat}]: {msg}");
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
