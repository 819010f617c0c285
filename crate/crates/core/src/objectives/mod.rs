//! Task batches and losses.
//!
//! A task turns sampled token windows into one or more [`TaskBatch`]es, and
//! [`score`] runs a built model on a batch to produce logits, aligned
//! targets and the masked cross-entropy.
//!
//! Shift convention: `targets[i]` is what the logits at decoder input `i`
//! should predict. For causal-style rows that is input `i + 1`; for
//! reconstruction rows (autoencoding, blank copy) it is the original token
//! at `i`.

mod tasks;

use serde::{Deserialize, Serialize};

pub use tasks::{
    lookup_task, register_task, task_names, AutoencodeTask, BlankCopyTask, CausalTask, CombinedTask, CopyTask, InfoNceTask,
    Task, TaskFactory, TaskOptions, TaskRegistry,
};

use crate::architectures::{ArchError, Built, Memories, MemoryVariant, Slot};
use crate::corpus::{SpecialTokens, TokenId};
use crate::numerics::{Expr, NodeId, NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("copy rows need at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("InfoNCE needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("task `{task}` is not defined for {model} models")]
    Unsupported { task: String, model: String },
    #[error("unknown task `{name}` (registered: {known})")]
    UnknownTask { name: String, known: String },
    #[error("{0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Causal,
    Autoencode,
    Copy,
    BlankCopy,
    InfoNce,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Causal => "causal",
            TaskKind::Autoencode => "autoencode",
            TaskKind::Copy => "copy",
            TaskKind::BlankCopy => "blank_copy",
            TaskKind::InfoNce => "infonce",
        }
    }
}

/// Model-ready rows of one task.
///
/// `inputs[b]`, `targets[b]` and `loss_mask[b]` have equal length.
/// `Slot::Memory(j)` marks a vector input: memory `j` for memory models,
/// unrolled vector `j` for autoencoders, and for InfoNCE the single query
/// whose positive is candidate `targets[b][0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub kind: TaskKind,
    pub batch: usize,
    /// Tokens summarized into vectors before decoding, `batch` rows of equal
    /// length, row-major. Empty when the decoder reads tokens only.
    pub prefix: Vec<TokenId>,
    pub inputs: Vec<Vec<Slot>>,
    pub targets: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<bool>>,
    /// Externally supplied embeddings `[batch, d]`, row-major, for
    /// autoencoders without an encoder. Empty otherwise.
    pub vectors: Vec<f32>,
    /// InfoNCE softmax temperature.
    pub temperature: f64,
}

impl TaskBatch {
    /// Number of positions contributing to the loss.
    pub fn loss_count(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }

    fn prefix_row(&self, b: usize) -> &[TokenId] {
        let len = self.prefix.len() / self.batch;
        &self.prefix[b * len..(b + 1) * len]
    }
}

fn tokens(ids: &[TokenId]) -> Vec<Slot> {
    ids.iter().map(|&t| Slot::Token(t)).collect()
}

/// Next-token targets for `inputs`; the last position has none.
pub fn causal_targets(inputs: &[TokenId], pad: TokenId) -> (Vec<TokenId>, Vec<bool>) {
    let mut targets: Vec<TokenId> = inputs.iter().skip(1).copied().collect();
    targets.push(pad);
    let mask = targets.iter().map(|&t| t != pad).collect();
    (targets, mask)
}

fn rows(tokens: &[TokenId], batch: usize) -> impl Iterator<Item = &[TokenId]> {
    tokens.chunks(tokens.len() / batch.max(1)).take(batch)
}

/// Causal rows. The first `prefix_len` tokens of every row go to the memory
/// encoder, the rest are decoder inputs with next-token targets.
pub fn make_causal_batch(tokens: &[TokenId], batch: usize, specials: SpecialTokens, prefix_len: usize) -> TaskBatch {
    let mut out = empty_batch(TaskKind::Causal, batch);
    for row in rows(tokens, batch) {
        let (pre, tail) = row.split_at(prefix_len.min(row.len()));
        out.prefix.extend_from_slice(pre);
        let (t, m) = causal_targets(tail, specials.pad);
        out.inputs.push(self::tokens(tail));
        out.targets.push(t);
        out.loss_mask.push(m);
    }
    out
}

fn empty_batch(kind: TaskKind, batch: usize) -> TaskBatch {
    TaskBatch {
        kind,
        batch,
        prefix: Vec::new(),
        inputs: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
        loss_mask: Vec::with_capacity(batch),
        vectors: Vec::new(),
        temperature: 1.0,
    }
}

/// Copy rows built from the first half of every `n`-token row: the half,
/// the delimiter triplet, then the half again, with loss only on
/// predictions of the repeated half. With `memory` the first occurrence of
/// the half becomes the memory prefix instead of decoder tokens. Decoder
/// inputs are clipped to `max_inputs`.
pub fn make_copy_batch(
    tokens: &[TokenId],
    batch: usize,
    specials: SpecialTokens,
    memory: bool,
    max_inputs: usize,
) -> Result<TaskBatch, ObjectiveError> {
    let n = tokens.len() / batch.max(1);
    if n < 2 {
        return Err(ObjectiveError::TooShort(n));
    }
    let halves: Vec<&[TokenId]> = rows(tokens, batch).map(|r| &r[..n / 2]).collect();
    Ok(copy_from_halves(&halves, specials, memory, max_inputs))
}

pub(crate) fn copy_from_halves(halves: &[&[TokenId]], specials: SpecialTokens, memory: bool, max_inputs: usize) -> TaskBatch {
    let mut out = empty_batch(TaskKind::Copy, halves.len());
    for half in halves {
        let mut inputs = Vec::with_capacity(2 * half.len() + 3);
        if memory {
            out.prefix.extend_from_slice(half);
        } else {
            inputs.extend_from_slice(half);
        }
        let copy_start = inputs.len() + 2;
        inputs.extend_from_slice(&specials.delimiter);
        inputs.extend_from_slice(half);
        inputs.truncate(max_inputs);
        let (targets, mut mask) = causal_targets(&inputs, specials.pad);
        mask.iter_mut().take(copy_start).for_each(|m| *m = false);
        out.inputs.push(self::tokens(&inputs));
        out.targets.push(targets);
        out.loss_mask.push(mask);
    }
    out
}

/// Blank-copy rows: the first half of every row is the memory prefix, and
/// the decoder sees the delimiter triplet followed by one blank per prefix
/// token, reconstructing the prefix at the blanks. The half must equal
/// `prefix_len`.
pub fn make_blank_copy_batch(
    tokens: &[TokenId],
    batch: usize,
    specials: SpecialTokens,
    prefix_len: usize,
    max_inputs: usize,
) -> Result<TaskBatch, ObjectiveError> {
    let n = tokens.len() / batch.max(1);
    if n < 2 {
        return Err(ObjectiveError::TooShort(n));
    }
    if n / 2 != prefix_len {
        return Err(ObjectiveError::Layout(format!(
            "blank copy of {}-token halves does not match a {prefix_len}-token memory prefix",
            n / 2
        )));
    }
    let halves: Vec<&[TokenId]> = rows(tokens, batch).map(|r| &r[..n / 2]).collect();
    Ok(blank_copy_from_halves(&halves, specials, max_inputs))
}

pub(crate) fn blank_copy_from_halves(halves: &[&[TokenId]], specials: SpecialTokens, max_inputs: usize) -> TaskBatch {
    let mut out = empty_batch(TaskKind::BlankCopy, halves.len());
    for half in halves {
        out.prefix.extend_from_slice(half);
        let mut inputs = specials.delimiter.to_vec();
        inputs.extend(std::iter::repeat(specials.blank).take(half.len()));
        let mut targets = vec![specials.pad; 3];
        targets.extend_from_slice(half);
        inputs.truncate(max_inputs);
        targets.truncate(max_inputs);
        out.loss_mask.push(targets.iter().map(|&t| t != specials.pad).collect());
        out.inputs.push(self::tokens(&inputs));
        out.targets.push(targets);
    }
    out
}

/// Reconstruction rows for imported embeddings: `vectors` holds one
/// `d`-vector per row of `tokens`.
pub fn make_embedding_batch(tokens: &[TokenId], vectors: Vec<f32>, batch: usize, specials: SpecialTokens) -> TaskBatch {
    let mut out = make_autoencode_batch(tokens, batch, specials);
    out.prefix.clear();
    out.vectors = vectors;
    out
}

/// Reconstruction rows: every row is encoded, and each of the `n` unrolled
/// vectors must reproduce the token at its position.
pub fn make_autoencode_batch(tokens: &[TokenId], batch: usize, specials: SpecialTokens) -> TaskBatch {
    let mut out = empty_batch(TaskKind::Autoencode, batch);
    out.prefix = tokens.to_vec();
    for row in rows(tokens, batch) {
        out.inputs.push((0..row.len()).map(Slot::Memory).collect());
        out.targets.push(row.to_vec());
        out.loss_mask.push(row.iter().map(|&t| t != specials.pad).collect());
    }
    out
}

/// Retrieval rows from `2n`-token rows: the first half is the query, the
/// second half its positive; other rows' positives are negatives.
pub fn make_infonce_batch(tokens: &[TokenId], batch: usize, temperature: f64) -> Result<TaskBatch, ObjectiveError> {
    if batch < 2 {
        return Err(ObjectiveError::TooFewCandidates(batch));
    }
    let mut out = empty_batch(TaskKind::InfoNce, batch);
    out.prefix = tokens.to_vec();
    out.temperature = temperature;
    for b in 0..batch {
        out.inputs.push(vec![Slot::Memory(0)]);
        out.targets.push(vec![b as TokenId]);
        out.loss_mask.push(vec![true]);
    }
    Ok(out)
}

/// Mean next-token cross-entropy of `logits [B, n, V]` over non-pad targets.
pub fn causal_loss(g: &mut Expr, logits: NodeId, tokens: &[TokenId], batch: usize, pad: TokenId) -> Result<NodeId, ObjectiveError> {
    let (mut targets, mut mask) = (Vec::with_capacity(tokens.len()), Vec::with_capacity(tokens.len()));
    for row in rows(tokens, batch) {
        let (t, m) = causal_targets(row, pad);
        targets.extend(t.into_iter().map(|t| t as usize));
        mask.extend(m);
    }
    Ok(g.cross_entropy(logits, targets, mask)?)
}

/// Mean cross-entropy of reconstructing every non-pad token in place.
pub fn retention_loss(g: &mut Expr, logits: NodeId, tokens: &[TokenId], pad: TokenId) -> Result<NodeId, ObjectiveError> {
    let targets = tokens.iter().map(|&t| t as usize).collect();
    let mask = tokens.iter().map(|&t| t != pad).collect();
    Ok(g.cross_entropy(logits, targets, mask)?)
}

/// Similarity logits `[Q, K]`: cosine similarity over temperature.
pub fn infonce_logits(g: &mut Expr, query: NodeId, candidates: NodeId, temperature: f64) -> Result<NodeId, ObjectiveError> {
    let k = g.shape(candidates)[0];
    if k < 2 {
        return Err(ObjectiveError::TooFewCandidates(k));
    }
    let q = g.l2_normalize(query, 1e-12)?;
    let c = g.l2_normalize(candidates, 1e-12)?;
    let sim = g.matmul_t(q, c, false, true)?;
    Ok(g.scale(sim, 1.0 / temperature)?)
}

/// InfoNCE: cross-entropy of the softmax over candidate similarities
/// against each query's positive.
pub fn infonce_loss(
    g: &mut Expr,
    query: NodeId,
    candidates: NodeId,
    positive: &[usize],
    temperature: f64,
) -> Result<NodeId, ObjectiveError> {
    let logits = infonce_logits(g, query, candidates, temperature)?;
    Ok(g.cross_entropy(logits, positive.to_vec(), vec![true; positive.len()])?)
}

/// Logits of one task batch with targets and mask aligned to their rows.
#[derive(Debug, Clone)]
pub struct Scored {
    pub kind: TaskKind,
    /// `[…, V]`; row `r` is scored against `targets[r]` where `mask[r]`.
    pub logits: NodeId,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub loss: NodeId,
}

fn model_name(model: &Built) -> &'static str {
    match model {
        Built::Decoder(_) => "decoder-only",
        Built::Autoencoder(_) => "autoencoder",
        Built::Memory(m) => match m.layout.variant {
            MemoryVariant::Parallel => "parallel memory",
            MemoryVariant::Oracle => "oracle memory",
            MemoryVariant::Recurrent => "recurrent memory",
        },
    }
}

fn unsupported(batch: &TaskBatch, model: &Built) -> ObjectiveError {
    ObjectiveError::Unsupported { task: batch.kind.as_str().into(), model: model_name(model).into() }
}

fn token_ids(batch: &TaskBatch) -> Option<Vec<usize>> {
    batch
        .inputs
        .iter()
        .flatten()
        .map(|s| match *s {
            Slot::Token(t) => Some(t as usize),
            Slot::Memory(_) => None,
        })
        .collect()
}

fn flat(batch: &TaskBatch) -> (Vec<usize>, Vec<bool>) {
    let targets = batch.targets.iter().flatten().map(|&t| t as usize).collect();
    let mask = batch.loss_mask.iter().flatten().copied().collect();
    (targets, mask)
}

/// Encodes a memory model's prefix; reusable across batches that share it.
pub fn encode_memories(g: &mut Expr, model: &Built, batch: &TaskBatch) -> Result<Option<Memories>, ObjectiveError> {
    match model {
        Built::Memory(m) if m.layout.variant != MemoryVariant::Recurrent && !batch.prefix.is_empty() => {
            Ok(Some(m.memories(g, &batch.prefix, batch.batch)?))
        }
        _ => Ok(None),
    }
}

/// Runs `model` on `batch`. Memory models reuse `memories` when given
/// (they must come from the same prefix).
pub fn score(g: &mut Expr, model: &Built, batch: &TaskBatch, memories: Option<&Memories>) -> Result<Scored, ObjectiveError> {
    if batch.kind == TaskKind::InfoNce {
        return score_infonce(g, model, batch);
    }
    let (mut targets, mut mask) = flat(batch);
    let logits = match model {
        Built::Decoder(net) => {
            let ids = token_ids(batch).ok_or_else(|| unsupported(batch, model))?;
            if !batch.prefix.is_empty() {
                return Err(unsupported(batch, model));
            }
            net.forward_tokens(g, &ids, batch.batch)?
        }
        Built::Autoencoder(ae) => {
            if batch.kind != TaskKind::Autoencode {
                return Err(unsupported(batch, model));
            }
            if ae.encoder.is_some() {
                let ids: Vec<usize> = batch.prefix.iter().map(|&t| t as usize).collect();
                ae.forward(g, &ids, batch.batch)?
            } else {
                let d = ae.embedding_dim();
                let vectors = Tensor::new(vec![batch.batch, d], batch.vectors.iter().map(|&x| f64::from(x)).collect())?;
                let e = g.constant(&vectors);
                ae.decode(g, e)?
            }
        }
        Built::Memory(m) if m.layout.variant == MemoryVariant::Recurrent => {
            if batch.kind != TaskKind::Causal || !batch.prefix.is_empty() {
                return Err(unsupported(batch, model));
            }
            let ids: Vec<TokenId> = token_ids(batch).ok_or_else(|| unsupported(batch, model))?.into_iter().map(|t| t as TokenId).collect();
            let segments = m.recurrent_logits(g, &ids, batch.batch)?;
            // Position i of a segment predicts token i: shift targets right.
            let n = ids.len() / batch.batch;
            let (shifted_t, shifted_m): (Vec<usize>, Vec<bool>) = (0..ids.len())
                .map(|i| if i % n == 0 { (0, false) } else { (targets[i - 1], mask[i - 1]) })
                .unzip();
            targets = shifted_t;
            mask = shifted_m;
            g.concat(&segments, 1)?
        }
        Built::Memory(m) => {
            let owned;
            let mem = match memories {
                Some(mem) => mem,
                None => {
                    if batch.prefix.is_empty() {
                        return Err(unsupported(batch, model));
                    }
                    owned = m.memories(g, &batch.prefix, batch.batch)?;
                    &owned
                }
            };
            let rows = m.rows(mem, &batch.inputs);
            let width = rows.len();
            let (mut t, mut k) = (Vec::with_capacity(batch.batch * width), Vec::with_capacity(batch.batch * width));
            for (b, &start) in rows.tail_start.iter().enumerate() {
                let len = batch.targets[b].len();
                t.extend(std::iter::repeat(0).take(start));
                t.extend(batch.targets[b].iter().map(|&x| x as usize));
                t.extend(std::iter::repeat(0).take(width - start - len));
                k.extend(std::iter::repeat(false).take(start));
                k.extend_from_slice(&batch.loss_mask[b]);
                k.extend(std::iter::repeat(false).take(width - start - len));
            }
            targets = t;
            mask = k;
            m.decoder_logits(g, Some(mem), &rows)?
        }
    };
    let loss = g.cross_entropy(logits, targets.clone(), mask.clone())?;
    Ok(Scored { kind: batch.kind, logits, targets, mask, loss })
}

fn score_infonce(g: &mut Expr, model: &Built, batch: &TaskBatch) -> Result<Scored, ObjectiveError> {
    let n = batch.prefix.len() / batch.batch / 2;
    let (mut query, mut positive) = (Vec::new(), Vec::new());
    for b in 0..batch.batch {
        let row = batch.prefix_row(b);
        query.extend(row[..n].iter().map(|&t| t as usize));
        positive.extend(row[n..].iter().map(|&t| t as usize));
    }
    let encoder = match model {
        Built::Decoder(net) => net,
        Built::Autoencoder(ae) => ae.encoder.as_ref().ok_or_else(|| unsupported(batch, model))?,
        Built::Memory(_) => return Err(unsupported(batch, model)),
    };
    let q = encoder.encode(g, &query, batch.batch)?;
    let p = encoder.encode(g, &positive, batch.batch)?;
    let logits = infonce_logits(g, q, p, batch.temperature)?;
    let (targets, mask) = flat(batch);
    let loss = g.cross_entropy(logits, targets.clone(), mask.clone())?;
    Ok(Scored { kind: batch.kind, logits, targets, mask, loss })
}

/// Weighted sum of the batches' losses. Consecutive batches with the same
/// memory prefix share one encoding.
pub fn task_loss(
    g: &mut Expr,
    model: &Built,
    batches: &[TaskBatch],
    weights: &[f64],
) -> Result<(NodeId, Vec<Scored>), ObjectiveError> {
    let mut scored = Vec::with_capacity(batches.len());
    let mut shared: Option<(usize, Memories)> = None;
    let mut total: Option<NodeId> = None;
    for (i, (b, &w)) in batches.iter().zip(weights).enumerate() {
        let reuse = matches!(&shared, Some((j, _)) if batches[*j].prefix == b.prefix && batches[*j].batch == b.batch);
        if !reuse && b.kind != TaskKind::InfoNce {
            shared = encode_memories(g, model, b)?.map(|m| (i, m));
        }
        let s = score(g, model, b, shared.as_ref().map(|(_, m)| m))?;
        let term = if w == 1.0 { s.loss } else { g.scale(s.loss, w)? };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
        scored.push(s);
    }
    let total = total.ok_or_else(|| ObjectiveError::Layout("task produced no batches".into()))?;
    Ok((total, scored))
}
