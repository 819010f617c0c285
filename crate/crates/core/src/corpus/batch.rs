use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, TokenId, Tokenizer};

/// Tokenized documents joined by a pad separator.
#[derive(Debug, Clone)]
pub struct TokenStream {
    tokens: Vec<TokenId>,
    doc_starts: Vec<usize>,
    pad: TokenId,
}

impl TokenStream {
    pub fn from_documents<S: AsRef<str>>(tokenizer: &Tokenizer, documents: &[S]) -> Result<Self, CorpusError> {
        let encoded = tokenizer.encode_all(documents);
        Self::from_encoded(encoded, tokenizer.pad())
    }

    pub fn from_encoded(documents: Vec<Vec<TokenId>>, pad: TokenId) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        let mut doc_starts = Vec::new();
        for doc in documents.into_iter().filter(|d| !d.is_empty()) {
            if !tokens.is_empty() {
                tokens.push(pad);
            }
            doc_starts.push(tokens.len());
            tokens.extend(doc);
        }
        if tokens.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Self { tokens, doc_starts, pad })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn document_count(&self) -> usize {
        self.doc_starts.len()
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    fn window(&self, start: usize, n_ctx: usize, out: &mut Vec<TokenId>) {
        let end = (start + n_ctx).min(self.tokens.len());
        out.extend_from_slice(&self.tokens[start..end]);
        out.extend(std::iter::repeat(self.pad).take(n_ctx - (end - start)));
    }
}

/// A `batch × n_ctx` token matrix with its masks, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub tokens: Vec<TokenId>,
    pub batch: usize,
    pub n_ctx: usize,
    /// True where the token is pad.
    pub pad_mask: Vec<bool>,
    /// True where a position contributes to the loss; defaults to non-pad.
    pub loss_mask: Vec<bool>,
    pub seed: u64,
    /// Stream offset of each row's first token (`None` for synthetic rows).
    pub offsets: Vec<Option<usize>>,
}

impl SequenceBatch {
    /// Builds a batch from rows, deriving masks from `pad`.
    pub fn from_rows(rows: Vec<Vec<TokenId>>, pad: TokenId, seed: u64) -> Self {
        let batch = rows.len();
        let n_ctx = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_ctx), "ragged batch rows");
        let tokens: Vec<TokenId> = rows.into_iter().flatten().collect();
        let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == pad).collect();
        let loss_mask = pad_mask.iter().map(|p| !p).collect();
        Self { tokens, batch, n_ctx, pad_mask, loss_mask, seed, offsets: vec![None; batch] }
    }

    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.n_ctx..(i + 1) * self.n_ctx]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[TokenId]> {
        self.tokens.chunks(self.n_ctx.max(1))
    }
}

/// Batch size for a context length under a fixed 32768-token budget per step.
pub fn batch_size_rule(n_ctx: usize) -> usize {
    32768 / n_ctx
}

/// Derives an independent seed for `step` of a run seeded with `seed`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `batch` windows of `n_ctx` tokens at uniformly random stream
/// offsets. Windows running past the end are right-padded.
pub fn sample_batch(stream: &TokenStream, n_ctx: usize, batch: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = stream.len().saturating_sub(n_ctx);
    let starts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..=last_start)).collect();
    windows(stream, &starts, n_ctx, seed)
}

/// Like [`sample_batch`], but every window starts at the first token of a
/// uniformly chosen document.
pub fn sample_document_batch(stream: &TokenStream, n_ctx: usize, batch: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<usize> =
        (0..batch).map(|_| stream.doc_starts[rng.gen_range(0..stream.doc_starts.len())]).collect();
    windows(stream, &starts, n_ctx, seed)
}

fn windows(stream: &TokenStream, starts: &[usize], n_ctx: usize, seed: u64) -> SequenceBatch {
    let mut tokens = Vec::with_capacity(starts.len() * n_ctx);
    for &s in starts {
        stream.window(s, n_ctx, &mut tokens);
    }
    let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == stream.pad).collect();
    let loss_mask = pad_mask.iter().map(|p| !p).collect();
    SequenceBatch {
        tokens,
        batch: starts.len(),
        n_ctx,
        pad_mask,
        loss_mask,
        seed,
        offsets: starts.iter().map(|&s| Some(s)).collect(),
    }
}

/// Sequences of i.i.d. uniform non-special ids.
pub fn uniform_random_batch(tokenizer: &Tokenizer, n_ctx: usize, batch: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = tokenizer.text_vocab_size() as TokenId;
    let rows = (0..batch).map(|_| (0..n_ctx).map(|_| rng.gen_range(0..support)).collect()).collect();
    SequenceBatch::from_rows(rows, tokenizer.pad(), seed)
}
