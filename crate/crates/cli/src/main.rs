//! `peftlab` — command-line front end for the fine-tuning pipeline.
//!
//! Exit codes: 0 success; 2 schema violations under `ingest --strict`;
//! 64 invalid flags or config; 66 missing input file; 70 internal error.
//! Diagnostics go to stderr, data to stdout.

mod cmd;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_NOINPUT: i32 = 66;
pub const EXIT_INTERNAL: i32 = 70;

/// Command outcomes that map onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file contents, or contradictory options.
    Usage(String),
    /// An input file or directory does not exist.
    MissingInput(String),
    /// `ingest --strict` found schema violations.
    StrictViolations(usize),
    /// Everything else.
    Internal(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

/// Wraps any library error as an internal (exit 70) failure.
pub fn internal<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Internal(e.into())
}

/// Writes data output to stdout. A broken pipe (e.g. piping into `head`)
/// ends the process quietly instead of panicking mid-`println!`.
pub fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(EXIT_OK),
        Err(e) => Err(internal(e)),
    }
}

/// Classifies an I/O error on `path`: not-found becomes `MissingInput`.
pub fn classify_io(err: std::io::Error, path: &std::path::Path) -> CliError {
    if err.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingInput(format!("{}: no such file or directory", path.display()))
    } else {
        CliError::Internal(anyhow::Error::new(err).context(format!("accessing {}", path.display())))
    }
}

#[derive(Parser)]
#[command(
    name = "peftlab",
    version,
    about = "Desk-scale medical-QA fine-tuning pipeline: corpus ETL, 4-bit quantized base, low-rank adapter training, and generation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MedQuAD XML directory, filter unanswered pairs, export JSONL.
    Ingest(IngestArgs),
    /// Print corpus statistics for a JSONL file.
    Stats(StatsArgs),
    /// Fine-tune adapters on a JSONL corpus and write a checkpoint.
    Train(TrainArgs),
    /// Inspect (or apply) 4-bit quantization of a checkpoint's base weights.
    Quantize(QuantizeArgs),
    /// Answer a single question from a checkpoint.
    Generate(GenerateArgs),
    /// Interactive question-answering session.
    Chat(ChatArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Directory scanned recursively for .xml documents.
    #[arg(long = "xml-dir")]
    pub xml_dir: PathBuf,
    /// Output JSONL file (answered records only).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional plain-text log of skipped files/pairs.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Exit with code 2 if any schema violation was skipped.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args)]
pub struct StatsArgs {
    /// JSONL corpus file.
    #[arg(long)]
    pub data: PathBuf,
    /// Emit JSON instead of aligned text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSONL corpus file.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key=value config file (dotted keys; unknown keys are an error).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Store only adapter tensors plus the base-weight pairing hash.
    #[arg(long = "adapters-only")]
    pub adapters_only: bool,
    /// Loss-history CSV path (default: checkpoint path + .loss.csv).
    #[arg(long = "loss-csv")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct QuantizeArgs {
    /// Input checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Print the per-tensor quantization table.
    #[arg(long)]
    pub inspect: bool,
    /// Write a quantized copy of the checkpoint here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First-level block size.
    #[arg(long = "block-size", default_value_t = 64)]
    pub block_size: usize,
    /// Disable double quantization of the block scales.
    #[arg(long = "no-double-quant")]
    pub no_double_quant: bool,
    /// Blocks per second-level quantization group.
    #[arg(long = "dq-group-size", default_value_t = 256)]
    pub dq_group_size: usize,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Greedy decoding (the default).
    #[arg(long, conflicts_with_all = ["top_k", "top_p"])]
    pub greedy: bool,
    /// Sample from the k most likely tokens.
    #[arg(long = "top-k", conflicts_with = "top_p")]
    pub top_k: Option<usize>,
    /// Nucleus sampling with cumulative probability p.
    #[arg(long = "top-p")]
    pub top_p: Option<f32>,
    /// Sampling seed (ignored by greedy).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Softmax temperature for the sampled modes.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long = "max-new-tokens", default_value_t = 128)]
    pub max_new_tokens: usize,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Checkpoint to answer from.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Base checkpoint for adapters-only files.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// The question to answer.
    #[arg(long)]
    pub question: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct ChatArgs {
    /// Checkpoint to chat with.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Base checkpoint for adapters-only files.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Ingest(args) => cmd::ingest::run(&args),
        Command::Stats(args) => cmd::stats::run(&args),
        Command::Train(args) => cmd::train::run(&args),
        Command::Quantize(args) => cmd::quantize::run(&args),
        Command::Generate(args) => cmd::generate::run(&args),
        Command::Chat(args) => cmd::chat::run(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::StrictViolations(n)) => {
            eprintln!("error: {n} schema violation(s) under --strict");
            EXIT_VIOLATIONS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::MissingInput(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NOINPUT
        }
        Err(CliError::Internal(e)) => {
            eprintln!("error: {e:#}");
            EXIT_INTERNAL
        }
    }
}
