//! `mmm`: train, evaluate and run experiment harnesses from JSON configs.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, unreadable or
//! invalid inputs), 2 when a run fails or a check does not pass.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "mmm",
    version,
    about = "Multi-choice reading comprehension with multi-step attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Mcqa,
    Nli,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training plan (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, metrics and stage reports
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the plan seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Continue from a checkpoint written by an earlier `train`
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Pause after this many optimizer steps and save a resumable checkpoint
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON array of examples
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "mcqa")]
    pub kind: Kind,
    /// Expand `w:`/`m:`/`f:` speaker tags first
    #[arg(long)]
    pub speaker_normalization: bool,
    /// Directory for the per-example report; nothing is written without it
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Experiment spec (JSON): a base plan plus aux/source/target names
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds to run, replacing the spec's list; repeatable
    #[arg(long)]
    pub seed: Vec<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Reasoning-step counts, comma separated; 0 is the feed-forward head
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: u64,
    /// Trailing steps averaged into the final loss
    #[arg(long, default_value_t = 20)]
    pub window: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Runs seeds 1..=N
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Runs this seed only
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic corpus spec (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mcqa")]
    pub kind: Kind,
    /// Output file name inside `--out`; defaults to `<kind>.json`
    #[arg(long)]
    pub name: Option<String>,
    /// Overrides the spec seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a staged plan
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a labeled dataset
    Eval(EvalArgs),
    /// Full configuration against one-component-removed variants
    Ablate(ExperimentArgs),
    /// Accuracy per number of reasoning steps
    SweepK(SweepArgs),
    /// Sequential, multi-task, merged and staged training orders
    CompareOrders(ExperimentArgs),
    /// In-domain training loss with and without coarse-tuning
    Converge(ConvergeArgs),
    /// Finite-difference check of every gradient
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus
    SynthGen(SynthArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::SweepK(a) => commands::sweep_k(&a),
        Command::CompareOrders(a) => commands::compare_orders(&a),
        Command::Converge(a) => commands::converge(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::SynthGen(a) => commands::synth_gen(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
