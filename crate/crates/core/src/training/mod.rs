//! Optimization: AdamW with warmup and linear decay, freezing by name
//! prefix, the training loop, the retention probe and curricula.

mod curriculum;
mod probe;
mod run;

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use curriculum::{run_curriculum, Stage};
pub use probe::{encoder_from_checkpoint, retention_probe, EncoderWeights, ProbeConfig, ProbeOutcome, ProbeSource};
pub use run::{
    run_training, BatchSampler, EmbeddingSampler, TaskSampler, TokenSource, TrainJob, TrainOutcome, TrainRecord, UniformTokens,
    METRICS_FILE, RECORD_SCHEMA,
};

use crate::architectures::{ArchError, ParamStore};
use crate::metrics::MetricsError;
use crate::numerics::{NumericsError, Tensor};
use crate::objectives::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {checkpoint:?}")]
    Diverged { step: usize, loss: f64, checkpoint: Option<PathBuf> },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("embedding dimension mismatch: file has {found}, probe expects {expected}")]
    EmbeddingDim { expected: usize, found: usize },
}

fn default_warmup() -> usize {
    500
}
fn default_lr() -> f64 {
    5e-4
}
fn default_wd() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}
fn default_eval_every() -> usize {
    500
}
fn default_eval_batches() -> usize {
    4
}

/// Optimizer, schedule and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Prefixes trained even when they match `freeze`.
    #[serde(default)]
    pub unfreeze: Vec<String>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Held-out batches per evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Checkpoint cadence in steps; the final checkpoint is always written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(total_steps: usize, batch_size: usize) -> Self {
        Self {
            peak_lr: default_lr(),
            warmup_steps: default_warmup().min(total_steps),
            total_steps,
            batch_size,
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
            seed: 0,
            freeze: Vec::new(),
            unfreeze: Vec::new(),
            eval_every: default_eval_every(),
            eval_batches: default_eval_batches(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be non-negative".into());
        }
        if self.eval_every == 0 || self.eval_batches == 0 || self.checkpoint_every == Some(0) {
            return bad("eval_every, eval_batches and checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Whether `name` receives updates.
    pub fn trainable(&self, name: &str) -> bool {
        !self.freeze.iter().any(|p| name.starts_with(p.as_str())) || self.unfreeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if cfg.total_steps == cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
}

/// Scales `grads` to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update of every parameter in `grads`
/// that `cfg` does not freeze. Non-finite gradients abort the step with
/// nothing changed.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        if !cfg.trainable(name) {
            continue;
        }
        let p = params
            .get_mut(name)
            .ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("gradient shape {:?} for `{name}` of shape {:?}", g.shape(), p.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = f64::from(g);
            let mut x = f64::from(*p);
            x -= lr * cfg.weight_decay * x;
            let mn = b1 * f64::from(*m) + (1.0 - b1) * g;
            let vn = b2 * f64::from(*v) + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            x -= lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *p = x as f32;
        }
    }
    Ok(())
}
