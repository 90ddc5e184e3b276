mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Breakpoint modeling: generate belief-tracking datasets, train and
/// evaluate breakpoint transformers, and probe intermediate beliefs.
#[derive(Parser, Debug)]
#[command(name = "bpt", version, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate oracle-checked train/dev/test splits.
    Generate(GenerateArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics and predictions.
    Eval(EvalArgs),
    /// Query beliefs at breakpoints of a story, one "j proposition" per line.
    Probe(ProbeArgs),
    /// Render learning-curve, ablation or metrics files as SVG.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Kinship,
    Microworld,
    Conflict,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    pub task: Task,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training examples (conflict: pairs).
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, env = "BPT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Events per story [default: 20 for microworld, 8 for conflict].
    #[arg(long)]
    pub n_events: Option<usize>,
    /// Questions per micro-world story.
    #[arg(long, default_value_t = 3)]
    pub n_qa: usize,
    /// Kinship chain lengths, cycled over examples.
    #[arg(long, default_value = "2,3,4,5")]
    pub k: String,
    /// Event composition held out of training, e.g. coref.give; adds a hard split.
    #[arg(long)]
    pub held_out: Option<String>,
    /// Size of the hard split.
    #[arg(long, default_value_t = 100)]
    pub hard: usize,
    /// Run on one thread.
    #[arg(long)]
    pub sequential: bool,
    /// Key = value or JSON file of flag values; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ffn: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 256)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub max_breakpoints: usize,
    /// Proposition vector: prefix-token state or mean of its tokens.
    #[arg(long, default_value = "prefix")]
    pub prop_pooling: String,
    /// Ablate the breakpoint self-attention stream.
    #[arg(long)]
    pub no_brk_self_attn: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with train.jsonl and dev.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub ckpt_out: Option<PathBuf>,
    /// Per-epoch JSON Lines log [default: <ckpt-out>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_prop: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_qa: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_gen: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup_steps: usize,
    /// Epochs without the proposition loss when QA is on.
    #[arg(long, default_value_t = 5)]
    pub qa_warmup_epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub early_stop_patience: usize,
    #[arg(long, env = "BPT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    pub time_budget_s: Option<f64>,
    /// Dev stories scored per epoch [default: all].
    #[arg(long)]
    pub dev_limit: Option<usize>,
    /// Train the multi-pass baseline head.
    #[arg(long, conflicts_with = "prop_only")]
    pub multipass: bool,
    /// Train the proposition-only baseline head.
    #[arg(long)]
    pub prop_only: bool,
    #[arg(long)]
    pub no_event_gen: bool,
    #[arg(long)]
    pub no_abstraction: bool,
    /// Also train on these train-set fractions and write a learning curve.
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long, default_value = "curve.csv")]
    pub curve_csv: PathBuf,
    /// Also train these ablations (brk_self_attn, event_gen, abstraction).
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long, default_value = "ablation.csv")]
    pub ablation_csv: PathBuf,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset file, or directory holding <split>.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Checkpoint; not needed with --gold-as-pred.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// single-read, multi-pass or prop-only.
    #[arg(long, default_value = "single-read")]
    pub mode: String,
    /// Output directory for metrics.json and predictions.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the gold labels themselves.
    #[arg(long)]
    pub gold_as_pred: bool,
    /// Skip question answering.
    #[arg(long)]
    pub no_qa: bool,
    /// Also compare single-read and multi-pass encoder calls and timing.
    #[arg(long)]
    pub efficiency: bool,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Story text containing [B] markers.
    #[arg(long)]
    pub story_file: PathBuf,
    #[arg(long, default_value = "single-read")]
    pub mode: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Learning-curve CSV.
    #[arg(long, group = "input")]
    pub curve_csv: Option<PathBuf>,
    /// Ablation CSV.
    #[arg(long, group = "input")]
    pub ablation_csv: Option<PathBuf>,
    /// Metrics JSON from eval.
    #[arg(long, group = "input")]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out_svg: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, files or incompatible inputs.
    Validation(String),
    /// A generated example disagrees with its oracle.
    Oracle(String),
    /// Training hit a non-finite loss.
    NonFinite(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Oracle(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Oracle(m) => write!(f, "oracle disagreement: {m}"),
            CliError::NonFinite(m) => write!(f, "training aborted: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probe(a) => commands::probe(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
