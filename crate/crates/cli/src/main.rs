//! `emofilm` command-line pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "emofilm", version, about = "Word-level emotion annotation and FiLM-conditioned token generation")]
struct Cli {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true, env = "EMOFILM_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `--set tts.loss.lambda_emo=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=JSON")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic corpora.
    GenData,
    /// Train the word-level emotion annotator.
    TrainAnnotator,
    /// Label every corpus utterance with the trained annotator.
    Annotate,
    /// Train the emotion-modulated generator.
    TrainTts,
    /// Generate speech tokens and emotion posteriors for the evaluation split.
    Synthesize,
    /// Score generated trajectories against gold.
    Evaluate {
        /// Directory of generation records (defaults to the configured one).
        #[arg(long)]
        generated: Option<PathBuf>,
    },
    /// Write SVG trajectory overlays.
    Plot {
        #[arg(long)]
        generated: Option<PathBuf>,
    },
    /// Run every step in order.
    Pipeline,
    /// Summarize a checkpoint file.
    Describe { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
