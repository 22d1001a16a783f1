use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphs4_cli::{
    cmd_adjacency, cmd_eval, cmd_finetune, cmd_gradcheck, cmd_pretrain, cmd_score, cmd_screen, cmd_synth, read_config,
    CliResult,
};

#[derive(Parser)]
#[command(name = "graphs4", version, about = "Graph-S4 masked-network pretraining, anomaly screening and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and partition.
    Synth(Common),
    /// Pretrain one model per self-supervised task.
    Pretrain(Common),
    /// Screen every task on the clinical_ss_val split.
    Screen(Common),
    /// Score one sample file under every task.
    Score {
        #[command(flatten)]
        common: Common,
        /// Matrix file (binary or CSV).
        sample: PathBuf,
    },
    /// Fine-tune a classifier on the labeled clinical data.
    Finetune(Common),
    /// Cross-validate fine-tuning.
    Eval(Common),
    /// Check every gradient against finite differences.
    Gradcheck(Common),
    /// Dump the learned adjacency of a checkpoint as CSV.
    Adjacency {
        #[command(flatten)]
        common: Common,
        /// Checkpoint name, e.g. a network.
        task: String,
    },
}

fn run(cmd: Command) -> CliResult<String> {
    let load = |c: Common| read_config(&c.config, c.output, c.seed);
    match cmd {
        Command::Synth(c) => cmd_synth(&load(c)?),
        Command::Pretrain(c) => cmd_pretrain(&load(c)?),
        Command::Screen(c) => Ok(cmd_screen(&load(c)?)?.to_table()),
        Command::Score { common, sample } => {
            let scores = cmd_score(&load(common)?, &sample)?;
            Ok(scores.iter().map(|(k, v)| format!("{k}\t{v:.6}\n")).collect())
        }
        Command::Finetune(c) => cmd_finetune(&load(c)?),
        Command::Eval(c) => Ok(cmd_eval(&load(c)?)?.to_table()),
        Command::Gradcheck(c) => cmd_gradcheck(&load(c)?),
        Command::Adjacency { common, task } => Ok(format!("{}\n", cmd_adjacency(&load(common)?, &task)?.display())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
