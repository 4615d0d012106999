//! `noah`: data generation, backbone pretraining, supernet training,
//! evolutionary search, retraining and evaluation from one binary.

mod commands;
mod config;
mod exit;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use noah_core::data::Task;
use noah_core::search_space::{ModuleKind, MutationScope};

#[derive(Parser)]
#[command(name = "noah", version, about = "Prompt-module architecture search on a frozen vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with an 80/20 train/val split.
    GenData(GenDataArgs),
    /// Train a backbone on the pretraining dataset and save it frozen.
    PretrainBackbone(PretrainArgs),
    /// Train the weight-entangled supernet by uniform subnet sampling.
    TrainSupernet(TrainSupernetArgs),
    /// Search for the best subnet under the parameter budget.
    Evolve(EvolveArgs),
    /// Train one subnet to convergence.
    Retrain(RetrainArgs),
    /// Print top-1 accuracy of a subnet on a dataset split.
    Eval(EvalArgs),
    /// Print the trainable prompt parameter count of a subnet.
    CountParams(CountParamsArgs),
    /// Train a single fixed prompt module.
    Baseline(BaselineArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the train/val split (defaults to --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct TrainSupernetArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone checkpoint; overrides the configured one.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Count the classifier head against the budget.
    #[arg(long)]
    pub budget_includes_head: bool,
}

#[derive(Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub supernet: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Threads scoring candidates; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub mutation_scope: Option<MutationScope>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub budget_includes_head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Init {
    /// Start from the supernet slices.
    Inherited,
    /// Start from newly initialized prompt weights and head.
    Fresh,
}

#[derive(Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub supernet: PathBuf,
    #[arg(long)]
    pub subnet: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Init::Inherited)]
    pub init: Init,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub budget_includes_head: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Supernet or subnet checkpoint.
    #[arg(long)]
    pub weights: PathBuf,
    /// Subnet config; optional when the checkpoint holds a subnet.
    #[arg(long)]
    pub subnet: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Args)]
pub struct CountParamsArgs {
    #[arg(long)]
    pub subnet: PathBuf,
    /// `vit-b`, `desk`, or `LAYERS,EMBED[,ATTN]`.
    #[arg(long, default_value = "desk")]
    pub backbone_dims: String,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub module: ModuleKind,
    /// Module dimension; defaults to the largest choice that fits the budget.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Defaults to the largest depth choice.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NOAH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::PretrainBackbone(a) => commands::pretrain(&a),
        Command::TrainSupernet(a) => commands::train_supernet(&a),
        Command::Evolve(a) => commands::evolve(&a),
        Command::Retrain(a) => commands::retrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CountParams(a) => commands::count_params(&a),
        Command::Baseline(a) => commands::baseline(&a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => ExitCode::from(exit::report(&e) as u8),
    }
}
