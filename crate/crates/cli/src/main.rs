//! `fedrec`: run federated recommendation experiments from TOML configs.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fedrec", version, about = "Federated recommendation simulator")]
struct Cli {
    /// Worker threads for local training and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (client strategy, item strategy, seed) cell of a config.
    Run(RunArgs),
    /// Run the 3x3 grid {wcu, fedfast, fedfnn} x {w0, w1, w2} and summarise checkpoints.
    Ablation(RunArgs),
    /// Generate a synthetic dataset with a ground-truth group map.
    Datagen(DatagenArgs),
    /// Evaluate a saved model on a config's leave-one-out split.
    EvalOnly(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    /// One wide CSV per cell: `round,hr,ndcg,loss`.
    Csv,
    /// Also write a long-format CSV (one metric per line) per cell.
    Long,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the config's seed list; repeat for several seeds.
    #[arg(long)]
    pub seed: Vec<u64>,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    pub emit: Emit,
    /// Overrides the number of rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Also write each cell's final model as JSON.
    #[arg(long)]
    pub save_model: bool,
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    /// TOML file with generator parameters; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "synthetic")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Model JSON written by `run --save-model`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(args) => commands::run(&args, false),
        Command::Ablation(args) => commands::run(&args, true),
        Command::Datagen(args) => commands::datagen(&args),
        Command::EvalOnly(args) => commands::eval_only(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
