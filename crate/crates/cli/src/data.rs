use std::path::Path;

use anyhow::{Context, Result};
use memlab::corpus::{load_documents, split_held_out, synthetic, TokenStream, Tokenizer, HELD_OUT_FRACTION};

use crate::config::{CorpusConfig, TokenizerConfig};

pub const TOKENIZER_FILE: &str = "tokenizer.json";

/// Tokenized train and held-out splits.
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: TokenStream,
    pub held_out: TokenStream,
}

pub fn documents(cfg: &CorpusConfig) -> Result<Vec<String>> {
    match (&cfg.path, &cfg.synthetic) {
        (Some(p), _) => load_documents(p).with_context(|| format!("reading corpus {}", p.display())),
        (None, spec) => Ok(synthetic::generate(&spec.unwrap_or_default())),
    }
}

/// Loads the configured tokenizer, or trains one on the training split and
/// saves it to `out_dir`.
pub fn tokenizer(cfg: &TokenizerConfig, train_docs: &[String], out_dir: &Path) -> Result<Tokenizer> {
    if let Some(p) = &cfg.path {
        return Tokenizer::load(p).with_context(|| format!("loading tokenizer {}", p.display()));
    }
    let vocab = cfg.vocab_size.context("tokenizer needs `path` or `vocab_size`")?;
    let tok = Tokenizer::train(train_docs, vocab)?;
    std::fs::create_dir_all(out_dir)?;
    tok.save(&out_dir.join(TOKENIZER_FILE))?;
    Ok(tok)
}

pub fn load(corpus: &CorpusConfig, tok: &TokenizerConfig, out_dir: &Path) -> Result<Corpus> {
    let docs = documents(corpus)?;
    let (train, held) = split_held_out(&docs, HELD_OUT_FRACTION)?;
    let tokenizer = tokenizer(tok, &train, out_dir)?;
    let train = TokenStream::from_documents(&tokenizer, &train)?;
    let held_out = TokenStream::from_documents(&tokenizer, &held)?;
    log::info!("corpus: {} train tokens, {} held-out tokens", train.len(), held_out.len());
    Ok(Corpus { tokenizer, train, held_out })
}
