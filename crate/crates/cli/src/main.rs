mod checkpoint;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::DecodeKind;

#[derive(Parser)]
#[command(name = "paragan", version, about = "Adversarially trained paragraph generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val corpus and a standalone paragraph corpus.
    Synth(SynthArgs),
    /// Train a generator and its critics.
    Train(TrainArgs),
    /// Decode one paragraph per input record.
    Generate(GenerateArgs),
    /// Score generated paragraphs against reference paragraphs.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of training scenes.
    #[arg(long)]
    pub count: usize,
    /// Number of validation scenes; defaults to a quarter of `--count`.
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Number of standalone paragraphs; defaults to `--count`.
    #[arg(long)]
    pub paragraphs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub regions: usize,
    /// Output directory for train.jsonl, val.jsonl and paragraphs.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration. Flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint directory; its config is the base unless `--config` is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long)]
    pub paragraph_corpus: Option<PathBuf>,
    #[arg(long)]
    pub val_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs to run in this invocation.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["fully", "semi"])]
    pub mode: Option<String>,
    /// Override any config key, e.g. `--set lr=0.002`. Values are parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Decoding mode; defaults to the checkpoint's config.
    #[arg(long)]
    pub mode: Option<DecodeKind>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Base seed for sample mode; example `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus JSONL; only ids and regions are read.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Force the first sentence of every paragraph.
    #[arg(long)]
    pub first_sentence: Option<String>,
    /// Include per-sentence attention weights in each output record.
    #[arg(long)]
    pub dump_attention: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint to generate candidates with. Not needed with `--candidates`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Corpus JSONL holding the reference paragraphs.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Score an existing `generate` output instead of decoding.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
