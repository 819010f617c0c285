use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_grad_norm, lr_schedule, AdamState, TrainConfig, TrainError};
use crate::architectures::{save_checkpoint, Built, ParamStore};
use crate::corpus::{sample_batch, sample_document_batch, step_seed, SpecialTokens, TokenId, TokenStream};
use crate::metrics::{evaluate_model, MetricReport};
use crate::numerics::Expr;
use crate::objectives::{make_embedding_batch, task_loss, Task, TaskBatch};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORD_SCHEMA: u32 = 1;
const EVAL_SALT: u64 = 0x5EED_E7A1;

/// Where token windows come from.
pub trait TokenSource: Sync {
    /// `batch` rows of `window` tokens, row-major.
    fn sample(&self, window: usize, batch: usize, seed: u64, document_aligned: bool) -> Vec<TokenId>;
}

impl TokenSource for TokenStream {
    fn sample(&self, window: usize, batch: usize, seed: u64, document_aligned: bool) -> Vec<TokenId> {
        if document_aligned {
            sample_document_batch(self, window, batch, seed).tokens
        } else {
            sample_batch(self, window, batch, seed).tokens
        }
    }
}

/// I.i.d. uniform ids from `0..support`.
#[derive(Debug, Clone, Copy)]
pub struct UniformTokens {
    pub support: usize,
}

impl TokenSource for UniformTokens {
    fn sample(&self, window: usize, batch: usize, seed: u64, _document_aligned: bool) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..window * batch).map(|_| rng.gen_range(0..self.support) as TokenId).collect()
    }
}

/// Produces the task batches of one step.
pub trait BatchSampler: Sync {
    fn name(&self) -> &str;
    fn sample(&self, batch: usize, seed: u64) -> Result<Vec<TaskBatch>, TrainError>;
    fn weights(&self) -> Vec<f64>;
}

/// Samples windows from a token source and shapes them with a task.
pub struct TaskSampler<'a> {
    pub task: Arc<dyn Task>,
    pub model: &'a Built,
    pub tokens: &'a dyn TokenSource,
    pub window: usize,
}

impl<'a> TaskSampler<'a> {
    pub fn new(task: Arc<dyn Task>, model: &'a Built, tokens: &'a dyn TokenSource) -> Result<Self, TrainError> {
        let window = task.window(model)?;
        Ok(Self { task, model, tokens, window })
    }
}

impl BatchSampler for TaskSampler<'_> {
    fn name(&self) -> &str {
        self.task.name()
    }

    fn sample(&self, batch: usize, seed: u64) -> Result<Vec<TaskBatch>, TrainError> {
        let tokens = self.tokens.sample(self.window, batch, seed, self.task.document_aligned());
        Ok(self.task.batches(self.model, &tokens, batch)?)
    }

    fn weights(&self) -> Vec<f64> {
        self.task.weights()
    }
}

/// Reconstruction batches from imported `(token ids, embedding)` records.
/// Ids are right-padded or clipped to `window`.
pub struct EmbeddingSampler<'a> {
    pub records: &'a [(Vec<TokenId>, Vec<f32>)],
    pub window: usize,
    pub specials: SpecialTokens,
}

impl BatchSampler for EmbeddingSampler<'_> {
    fn name(&self) -> &str {
        "autoencode"
    }

    fn sample(&self, batch: usize, seed: u64) -> Result<Vec<TaskBatch>, TrainError> {
        if self.records.is_empty() {
            return Err(TrainError::Config("no embedding records".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tokens, mut vectors) = (Vec::new(), Vec::new());
        for _ in 0..batch {
            let (ids, v) = &self.records[rng.gen_range(0..self.records.len())];
            tokens.extend(ids.iter().take(self.window));
            tokens.extend(std::iter::repeat(self.specials.pad).take(self.window.saturating_sub(ids.len())));
            vectors.extend_from_slice(v);
        }
        Ok(vec![make_embedding_batch(&tokens, vectors, batch, self.specials)])
    }

    fn weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// One evaluation point of a run (one JSONL line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub schema: u32,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub task: String,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f64>,
    /// Headline held-out metrics (first evaluation).
    pub loss: f64,
    pub h_r: f64,
    pub token_accuracy: f64,
    pub lr: f64,
    /// Wall-clock since the start of the run; null in deterministic mode.
    pub seconds: Option<f64>,
    pub evals: IndexMap<String, MetricReport>,
}

/// Everything one training run needs.
pub struct TrainJob<'a> {
    pub model: &'a Built,
    pub config: &'a TrainConfig,
    /// Stored in checkpoint manifests.
    pub model_config: serde_json::Value,
    pub train: &'a dyn BatchSampler,
    /// Held-out evaluations; the first is the headline metric.
    pub evals: Vec<&'a dyn BatchSampler>,
    pub out_dir: Option<PathBuf>,
    /// Omits wall-clock times so metrics files are byte-reproducible.
    pub deterministic: bool,
    pub stage: Option<String>,
    /// Added to reported steps (curriculum stages).
    pub step_offset: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub records: Vec<TrainRecord>,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

fn vocab_size(model: &Built) -> usize {
    match model {
        Built::Decoder(n) => n.cfg.vocab_size,
        Built::Autoencoder(a) => a.decoder.cfg.vocab_size,
        Built::Memory(m) => m.decoder.cfg.vocab_size,
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

struct Evaluator<'a> {
    sets: Vec<(String, Vec<Vec<TaskBatch>>)>,
    model: &'a Built,
}

impl<'a> Evaluator<'a> {
    fn new(job: &TrainJob<'a>) -> Result<Self, TrainError> {
        let cfg = job.config;
        let mut sets = Vec::with_capacity(job.evals.len());
        for (k, sampler) in job.evals.iter().enumerate() {
            let groups = (0..cfg.eval_batches)
                .map(|i| sampler.sample(cfg.batch_size, step_seed(cfg.seed ^ EVAL_SALT, (k * 1_000_003 + i) as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut name = sampler.name().to_string();
            if sets.iter().any(|(n, _)| *n == name) {
                name = format!("{name}#{k}");
            }
            sets.push((name, groups));
        }
        Ok(Self { sets, model: job.model })
    }

    fn run(&self, params: &ParamStore) -> Result<IndexMap<String, MetricReport>, TrainError> {
        let mut out = IndexMap::new();
        for (name, groups) in &self.sets {
            out.insert(name.clone(), evaluate_model(self.model, params, groups)?);
        }
        Ok(out)
    }
}

/// Trains `params` in place of a copy and returns them with the record
/// stream. Records are written to `out_dir/metrics.jsonl` as they are made,
/// with a checkpoint at every `checkpoint_every` steps and at the end.
pub fn run_training(job: &TrainJob<'_>, params: ParamStore) -> Result<TrainOutcome, TrainError> {
    let cfg = job.config;
    cfg.validate()?;
    if job.evals.is_empty() {
        return Err(TrainError::Config("at least one evaluation is required".into()));
    }
    let mut params = params;
    let start = Instant::now();
    let threshold = 3.0 * (vocab_size(job.model) as f64).ln();
    let evaluator = Evaluator::new(job)?;
    let weights = job.train.weights();
    let mut writer = match &job.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
            let path = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&path).map_err(io(&path))?), path))
        }
        None => None,
    };
    let frozen: Vec<&str> = params.names().filter(|n| !cfg.trainable(n)).collect();
    log::info!(
        "training {} for {} steps ({} frozen tensors)",
        job.train.name(),
        cfg.total_steps,
        frozen.len()
    );

    let mut records = Vec::new();
    let mut state = AdamState::default();
    let mut last_good: Option<PathBuf> = None;
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);

    let mut record = |step: usize,
                      params: &ParamStore,
                      train_loss: Option<f64>,
                      records: &mut Vec<TrainRecord>|
     -> Result<(), TrainError> {
        let evals = evaluator.run(params)?;
        let head = evals[0];
        let rec = TrainRecord {
            schema: RECORD_SCHEMA,
            step: job.step_offset + step,
            stage: job.stage.clone(),
            task: job.train.name().to_string(),
            train_loss,
            loss: head.loss,
            h_r: head.h_r,
            token_accuracy: head.token_accuracy,
            lr: lr_schedule(step, cfg),
            seconds: (!job.deterministic).then(|| start.elapsed().as_secs_f64()),
            evals,
        };
        log::info!(
            "step {} loss {:.4} held-out {:.4} acc {:.2}%",
            rec.step,
            train_loss.unwrap_or(f64::NAN),
            rec.loss,
            100.0 * rec.token_accuracy
        );
        if let Some((w, path)) = writer.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io(path))?;
        }
        records.push(rec);
        Ok(())
    };

    record(0, &params, None, &mut records)?;
    for step in 1..=cfg.total_steps {
        let group = job.train.sample(cfg.batch_size, step_seed(cfg.seed, step as u64))?;
        let mut g = Expr::new();
        let (loss, _) = task_loss(&mut g, job.model, &group, &weights)?;
        let wrt: Vec<&str> = g.input_names().into_iter().filter(|n| cfg.trainable(n)).collect();
        let diverged = |loss: f64| TrainError::Diverged { step, loss, checkpoint: last_good.clone() };
        let ev = match g.forward(&params) {
            Ok(ev) => ev,
            Err(crate::numerics::NumericsError::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e.into()),
        };
        let value = f64::from(ev.value(loss).item());
        if !value.is_finite() || value > threshold {
            return Err(diverged(value));
        }
        let mut grads = ev.backward(loss, &wrt)?;
        drop(ev);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        match adamw_step(&mut params, &grads, &mut state, lr_schedule(step, cfg), cfg) {
            Err(TrainError::NonFiniteGradient(name)) => log::warn!("step {step}: skipped, non-finite gradient for `{name}`"),
            other => other?,
        }
        loss_sum += value;
        loss_n += 1;

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            record(step, &params, Some(loss_sum / loss_n as f64), &mut records)?;
            loss_sum = 0.0;
            loss_n = 0;
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &job.out_dir) {
            if step % every == 0 && step != cfg.total_steps {
                let path = dir.join("checkpoints").join(format!("step-{step}"));
                save_checkpoint(&path, &job.model_config, &params)?;
                last_good = Some(path);
            }
        }
    }
    if let Some(dir) = &job.out_dir {
        save_checkpoint(&dir.join("checkpoint"), &job.model_config, &params)?;
    }
    Ok(TrainOutcome { params, records })
}
