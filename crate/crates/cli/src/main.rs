//! `actual`: prepare corpora, run the training phases, evaluate and sample.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "actual",
    version,
    about = "Actor-critic fine-tuning of RNN generators against a GAN discriminator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration; defaults to the snapshot in the output directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding the corpus, checkpoint and metrics.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override, applied after the file (repeatable; dotted keys reach tables).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Let `train` start without the pretraining phases.
    #[arg(long, global = true)]
    allow_cold_start: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary and the train/valid/test splits.
    Prepare,
    /// Teacher-forcing pretraining with early stopping.
    PretrainActor,
    /// Critic pretraining against a frozen actor.
    PretrainCritic,
    /// Actor-critic fine-tuning.
    Train,
    /// Per-token NLL and bits per token on the valid and test splits.
    Eval,
    /// Free-running generations from the actor.
    Sample {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        greedy: bool,
    },
    /// Gradient checks and oracle equivalences.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run::dispatch(&cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
