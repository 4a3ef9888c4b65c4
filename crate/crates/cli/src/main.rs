//! `dualcls`: generate corpora, train, evaluate, diagnose and export embeddings.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "dualcls",
    version,
    about = "Dual-[CLS] MLM + alignment training and collapse diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-language parallel corpus as TSV.
    GenCorpus(GenCorpusArgs),
    /// Train a model and populate a run directory.
    Train(TrainArgs),
    /// Print validation losses of a checkpoint as JSON.
    Eval(EvalArgs),
    /// Write cosine table, spectrum, curves and embeddings for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Write occluded-pass [CLS] embeddings as JSONL.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Number of synthetic languages (at least 2).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(2..=1000))]
    pub languages: u64,
    /// Number of translation pairs.
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    /// Additional same-language paraphrase pairs (for monolingual packing).
    #[arg(long, default_value_t = 0)]
    pub monolingual_pairs: usize,
    /// Shortest sentence, in words.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub min_len: u64,
    /// Longest sentence, in words.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_len: u64,
    /// Size of the shared meaning vocabulary.
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    pub vocab_size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus TSV; overrides `corpus.path` from the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (a run directory's `checkpoint/`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus TSV the checkpoint was trained on.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory receiving the report files.
    #[arg(long)]
    pub output: PathBuf,
    /// Metrics log for the curves; defaults to `metrics.jsonl` beside the checkpoint directory.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Mismatched partners sampled per pair and unrelated category.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub unrelated_samples: u64,
    /// Seed for unrelated-partner sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Validation,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Which pairs to embed.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(e)) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let s_msg = s.to_string();
                if !msg.contains(&s_msg) {
                    msg.push_str(": ");
                    msg.push_str(&s_msg);
                }
                source = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
