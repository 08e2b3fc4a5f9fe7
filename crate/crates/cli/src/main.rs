//! `ovattr`: synthesize data, train, evaluate and run inference.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and data errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "ovattr", version, about = "Attribute-aware open-vocabulary detection")]
struct Cli {
    /// Configuration file (`[model]`, `[train]`, `[data]`, `[eval]`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and held-out splits.
    Synth(SynthArgs),
    /// Run the O → A → F schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Run one inference mode on a single image.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_heldout: Option<usize>,
    /// Embed pixels in the JSON instead of writing PPM files.
    #[arg(long)]
    pub inline: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `synth` (or any directory holding `train.json`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps_o: Option<u64>,
    #[arg(long)]
    pub steps_a: Option<u64>,
    #[arg(long)]
    pub steps_f: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resume even if the configuration hash differs.
    #[arg(long)]
    pub force: bool,
    /// Also write the checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Stop after this global step (the checkpoint can be resumed).
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Training output directory or checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Also write the normalized instance × phrase logits matrix.
    #[arg(long)]
    pub logits_matrix: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Closed,
    AttrClassify,
    AttrLocalize,
    Open,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Semicolon-separated queries.
    #[arg(long)]
    pub queries: Option<String>,
    /// One query per line; `#` starts a comment line.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
    #[arg(long, default_value_t = ovattr::inference::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Target box `x0,y0,x1,y1` (normalized) for attribute classification.
    #[arg(long)]
    pub r#box: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub image_id: u64,
    /// Output JSON; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = commands::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Eval(a) => commands::eval(cfg, &a),
        Command::Infer(a) => commands::infer(cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
