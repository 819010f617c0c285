//! Text ingestion, byte-level BPE tokenization and deterministic batch
//! sampling.
//!
//! A corpus is a list of documents. Files are read in path order and split
//! into documents at blank lines. For sampling, the documents of a split are
//! tokenized and joined into one [`TokenStream`] with a pad id between
//! neighbours; batches are windows into that stream.

mod batch;
pub mod synthetic;
mod tokenizer;

use std::path::{Path, PathBuf};

pub use batch::{batch_size_rule, sample_batch, sample_document_batch, step_seed, uniform_random_batch, SequenceBatch, TokenStream};
pub use tokenizer::{SpecialTokens, TokenId, Tokenizer, SPECIAL_COUNT};

/// Fraction of documents, taken from the end, reserved for evaluation.
pub const HELD_OUT_FRACTION: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("vocabulary size {requested} is too small; need at least {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("corpus is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is not valid UTF-8")]
    Utf8 { path: PathBuf },
    #[error("need at least 2 documents to hold some out, found {0}")]
    TooFewDocuments(usize),
    #[error("malformed tokenizer file: {0}")]
    Format(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Splits text into documents at runs of blank lines. Whitespace-only
/// documents are dropped.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if !current.trim().is_empty() {
                docs.push(current.trim_end().to_string());
            }
            current.clear();
        } else {
            current.push_str(line);
        }
    }
    if !current.trim().is_empty() {
        docs.push(current.trim_end().to_string());
    }
    docs
}

/// Reads a UTF-8 file, or every file under a directory in sorted path order,
/// and returns its documents.
pub fn load_documents(path: &Path) -> Result<Vec<String>, CorpusError> {
    let mut docs = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(path).to_path_buf();
            CorpusError::Io { path: p, source: e.into() }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| CorpusError::io(entry.path(), e))?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::Utf8 { path: entry.path().to_path_buf() })?;
        docs.extend(split_documents(&text));
    }
    if docs.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(docs)
}

/// Splits documents into (train, held-out); held-out is the last
/// `ceil(fraction · n)` documents, at least one, leaving at least one.
pub fn split_held_out<S: Clone>(documents: &[S], fraction: f64) -> Result<(Vec<S>, Vec<S>), CorpusError> {
    let n = documents.len();
    if n < 2 {
        return Err(CorpusError::TooFewDocuments(n));
    }
    let held = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    Ok((documents[..n - held].to_vec(), documents[n - held..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_separate_documents() {
        let docs = split_documents("one\ntwo\n\n\n  \nthree\n");
        assert_eq!(docs, vec!["one\ntwo".to_string(), "three".to_string()]);
    }

    #[test]
    fn held_out_is_the_tail() {
        let docs: Vec<u32> = (0..40).collect();
        let (train, held) = split_held_out(&docs, HELD_OUT_FRACTION).unwrap();
        assert_eq!(held, vec![38, 39]);
        assert_eq!(train.len(), 38);
        assert!(split_held_out(&[1], 0.05).is_err());
    }
}
