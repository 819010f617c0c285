//! Tokenizer-independent information metrics.

use serde::{Deserialize, Serialize};

use crate::architectures::Built;
use crate::corpus::TokenId;
use crate::numerics::{Bindings, Expr, NumericsError, Real, Tensor};
use crate::objectives::{task_loss, ObjectiveError, TaskBatch};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("loss must be non-negative, got {0}")]
    NegativeLoss(f64),
    #[error("entropy ratio needs a vocabulary of at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("{predicted} predictions for {targets} targets")]
    LengthMismatch { predicted: usize, targets: usize },
    #[error("every target is pad; accuracy is undefined")]
    AllPad,
    #[error("empty evaluation set")]
    Empty,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `H_r = 1 − loss / ln|t|`: 1 for a perfect model, 0 for one no better
/// than uniform output.
pub fn entropy_ratio(loss: f64, vocab_size: usize) -> Result<f64, MetricsError> {
    if vocab_size < 2 {
        return Err(MetricsError::VocabTooSmall(vocab_size));
    }
    if loss < 0.0 || loss.is_nan() {
        return Err(MetricsError::NegativeLoss(loss));
    }
    Ok(1.0 - loss / (vocab_size as f64).ln())
}

/// Fraction of non-pad targets predicted exactly.
pub fn token_accuracy(predicted: &[TokenId], targets: &[TokenId], pad: TokenId) -> Result<f64, MetricsError> {
    if predicted.len() != targets.len() {
        return Err(MetricsError::LengthMismatch { predicted: predicted.len(), targets: targets.len() });
    }
    let (mut hits, mut count) = (0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(targets) {
        if t != pad {
            count += 1;
            hits += usize::from(p == t);
        }
    }
    if count == 0 {
        return Err(MetricsError::AllPad);
    }
    Ok(hits as f64 / count as f64)
}

/// Greedy predictions: the argmax of every row of `logits [.., V]`, first
/// index on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let v = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(v.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Loss, entropy ratio and accuracy over a set of scored positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean cross-entropy in nats per scored position.
    pub loss: f64,
    pub h_r: f64,
    pub token_accuracy: f64,
    pub n_evaluated: usize,
    /// `ln|t|` used for `h_r`.
    pub denominator: f64,
}

impl MetricReport {
    pub fn new(loss: f64, hits: usize, n_evaluated: usize, vocab_size: usize) -> Result<Self, MetricsError> {
        if n_evaluated == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(Self {
            loss,
            h_r: entropy_ratio(loss.max(0.0), vocab_size)?,
            token_accuracy: hits as f64 / n_evaluated as f64,
            n_evaluated,
            denominator: (vocab_size as f64).ln(),
        })
    }
}

/// Accumulates loss and greedy hits across batches.
#[derive(Debug, Clone, Default)]
pub struct Tally {
    pub loss_sum: f64,
    pub hits: usize,
    pub count: usize,
    pub vocab_size: usize,
}

impl Tally {
    /// Adds `mean_loss` over the masked rows of `logits`.
    pub fn add<T: Real>(&mut self, logits: &Tensor<T>, targets: &[usize], mask: &[bool], mean_loss: f64) {
        let pred = argmax_rows(logits);
        let n = mask.iter().filter(|&&m| m).count();
        self.hits += pred.iter().zip(targets).zip(mask).filter(|((p, t), m)| **m && p == t).count();
        self.count += n;
        self.loss_sum += mean_loss * n as f64;
        self.vocab_size = *logits.shape().last().unwrap_or(&0);
    }

    pub fn report(&self) -> Result<MetricReport, MetricsError> {
        MetricReport::new(self.loss_sum / self.count.max(1) as f64, self.hits, self.count, self.vocab_size)
    }
}

/// Evaluates `model` on prepared task batches (one group per sampled
/// step). Loss is the mean over every scored position of every batch;
/// accuracy uses greedy argmax decoding.
pub fn evaluate_model<T: Real, B: Bindings<T> + ?Sized>(
    model: &Built,
    params: &B,
    groups: &[Vec<TaskBatch>],
) -> Result<MetricReport, MetricsError> {
    let mut tally = Tally::default();
    for group in groups {
        let mut g = Expr::new();
        let weights = vec![1.0; group.len()];
        let (_, scored) = task_loss(&mut g, model, group, &weights)?;
        let ev = g.forward(params)?;
        for s in &scored {
            tally.add(ev.value(s.logits), &s.targets, &s.mask, ev.value(s.loss).item().as_f64());
        }
    }
    if tally.count == 0 {
        return Err(MetricsError::Empty);
    }
    tally.report()
}
