//! Command line front end: synthesize data, train stages, generate
//! questions, score them and probe cross-modal alignment.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use encgen::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "encgen", version, about = "Encoder-as-generator visual question generation")]
pub struct Cli {
    /// Seed for data synthesis, initialization, shuffling and dropout.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,

    /// Flat key=value file with model, training and decoding settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory, created when missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus, region features and vocabulary.
    Synth(SynthArgs),
    /// Run one training stage and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Generate one question per corpus item.
    Generate(GenerateArgs),
    /// Score generated questions against the corpus references.
    Eval(EvalArgs),
    /// Per-layer cross-modal similarity and attention summaries.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    /// Reference questions per item.
    #[arg(long, default_value_t = 3)]
    pub refs: usize,
    #[arg(long, default_value_t = 8)]
    pub num_regions: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["1", "2", "2u", "3", "3scratch"])]
    pub stage: String,
    /// Directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    /// Caption-only checkpoint; defaults to `<out>/stage1.ckpt` for stages 2, 2u and 3.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Image-only checkpoint; defaults to `<out>/stage2.ckpt` for stage 3.
    #[arg(long)]
    pub stage2: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Caption,
    Image,
    Both,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// File written by `generate`.
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `label=path`, repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<String>,
    /// Also probe an untrained model with the reserved seed.
    #[arg(long)]
    pub random: bool,
    #[arg(long, default_value = "centered", value_parser = ["raw", "centered"])]
    pub centering: String,
    /// Items per checkpoint for attention summaries; 0 skips them.
    #[arg(long, default_value_t = 0)]
    pub attention_items: usize,
}

pub const EXIT_USAGE: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Data => 3,
        ErrorKind::Prerequisite => 4,
        ErrorKind::Numeric => 5,
    }
}

fn kind_name(code: u8) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        3 => "data",
        4 => "prerequisite",
        _ => "numeric",
    }
}

fn report(code: u8, message: &str) -> ExitCode {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={} exit={code} message={flat:?}", kind_name(code));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            return report(EXIT_USAGE, line.trim_start_matches("error: "));
        }
    };
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(exit_code(&e), &e.to_string()),
    }
}
