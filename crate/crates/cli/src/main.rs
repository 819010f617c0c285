use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use memlab_cli::commands::{self, EvalOptions};
use memlab_cli::config::{ExperimentConfig, ProbeFileConfig, TokenizerConfig};

#[derive(Parser)]
#[command(name = "memlab", version, about = "Memory-embedding models, retention probes and cost planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML experiment file.
    Train { config: PathBuf },
    /// Train a retention probe from a TOML probe file.
    Probe { config: PathBuf },
    /// Evaluate a checkpoint on one task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "causal")]
        task: String,
        /// Corpus file or directory; the built-in synthetic text when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score uniform-random token sequences.
        #[arg(long)]
        uniform: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the chunking cost table as TSV.
    Plan {
        #[arg(long)]
        n: usize,
        /// Chunk counts to tabulate.
        #[arg(long, value_delimiter = ',')]
        s: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        d_model: usize,
    },
    /// Write encoder embeddings of corpus windows to a binary file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embed the held-out split instead of the training split.
        #[arg(long)]
        held_out: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train a byte-level BPE tokenizer.
    TokenizerTrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn tokenizer_at(path: PathBuf) -> Result<TokenizerConfig> {
    anyhow::ensure!(path.exists(), "tokenizer {} does not exist", path.display());
    Ok(TokenizerConfig { path: Some(path), vocab_size: None })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = commands::train(&cfg)?;
            if let Some(r) = out.last() {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Command::Probe { config } => {
            let cfg = ProbeFileConfig::load(&config)?;
            println!("{}", serde_json::to_string(&commands::probe(&cfg)?)?);
        }
        Command::Eval { checkpoint, task, corpus, tokenizer, batches, batch_size, seed, uniform, out } => {
            let opts = EvalOptions { task, batches, batch_size, seed, uniform };
            let report = commands::eval(&checkpoint, &commands::corpus_arg(corpus)?, &tokenizer_at(tokenizer)?, &opts)?;
            let json = serde_json::to_string(&report)?;
            if let Some(p) = out {
                std::fs::write(&p, format!("{json}\n"))?;
            }
            println!("{json}");
        }
        Command::Plan { n, s, d_model } => {
            let (tsv, best) = commands::plan(n, &s, d_model)?;
            eprintln!("n = {n}: optimal s = {} (n^(2/3) = {:.2}, rounded {})", best.s, best.real, best.rounded);
            print!("{tsv}");
        }
        Command::ExportEmbeddings { checkpoint, corpus, tokenizer, out, held_out, limit } => {
            let n = commands::export_embeddings(&checkpoint, &commands::corpus_arg(corpus)?, &tokenizer_at(tokenizer)?, &out, held_out, limit)?;
            eprintln!("wrote {n} embeddings to {}", out.display());
        }
        Command::TokenizerTrain { corpus, vocab_size, out } => {
            let tok = commands::tokenizer_train(&commands::corpus_arg(corpus)?, vocab_size, &out)?;
            eprintln!("wrote a {}-token tokenizer to {}", tok.vocab_size(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
