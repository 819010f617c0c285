use std::fmt::Debug;
use std::sync::{Arc, OnceLock, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{
    copy_from_halves, make_autoencode_batch, make_blank_copy_batch, make_causal_batch, make_copy_batch, make_infonce_batch,
    ObjectiveError, TaskBatch,
};
use crate::architectures::{Built, MemoryModel, MemoryVariant};
use crate::corpus::{SpecialTokens, TokenId};

/// A training or evaluation task: how many tokens an example needs and how
/// sampled windows become model-ready batches.
pub trait Task: Send + Sync + Debug {
    fn name(&self) -> &str;

    /// Tokens per sampled example for `model`.
    fn window(&self, model: &Built) -> Result<usize, ObjectiveError>;

    /// Whether examples start at document starts.
    fn document_aligned(&self) -> bool {
        false
    }

    /// Batches from `batch` rows of `window` tokens each, row-major.
    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError>;

    /// Loss weight of each batch returned by [`Task::batches`].
    fn weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

fn default_weights() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_temperature() -> f64 {
    0.07
}

/// Task hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOptions {
    /// Weights of the causal and copy terms of the combined objective.
    #[serde(default = "default_weights")]
    pub combined_weights: [f64; 2],
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self { combined_weights: default_weights(), temperature: default_temperature() }
    }
}

fn unsupported(task: &str, model: &Built) -> ObjectiveError {
    ObjectiveError::Unsupported { task: task.into(), model: super::model_name(model).into() }
}

fn specials(model: &Built) -> SpecialTokens {
    let v = match model {
        Built::Decoder(n) => n.cfg.vocab_size,
        Built::Autoencoder(a) => a.decoder.cfg.vocab_size,
        Built::Memory(m) => m.decoder.cfg.vocab_size,
    };
    SpecialTokens::for_vocab(v)
}

/// Encoder-fed memory model (parallel or oracle).
fn encoded_memory(model: &Built) -> Option<&MemoryModel> {
    match model {
        Built::Memory(m) if m.layout.variant != MemoryVariant::Recurrent => Some(m),
        _ => None,
    }
}

/// Decoder positions left after the memories.
fn room(m: &MemoryModel) -> usize {
    m.decoder.n_ctx().saturating_sub(m.layout.memories_per_row())
}

/// Length of the half copied by a decoder-only model.
fn decoder_copy_half(n_ctx: usize) -> usize {
    n_ctx.saturating_sub(3) / 2
}

fn sub_rows(tokens: &[TokenId], batch: usize, len: usize) -> Vec<TokenId> {
    let n = tokens.len() / batch;
    tokens.chunks(n).flat_map(|r| r[..len].iter().copied()).collect()
}

/// Next-token prediction. Memory models predict the tokens after their
/// memory prefix; the recurrent variant predicts every token of its
/// segments.
#[derive(Debug, Default)]
pub struct CausalTask;

impl CausalTask {
    fn prefix_len(model: &Built) -> usize {
        encoded_memory(model).map_or(0, |m| m.layout.prefix_len())
    }
}

impl Task for CausalTask {
    fn name(&self) -> &str {
        "causal"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        match model {
            Built::Decoder(n) => Ok(n.n_ctx()),
            Built::Autoencoder(_) => Err(unsupported(self.name(), model)),
            Built::Memory(m) if m.layout.variant == MemoryVariant::Recurrent => Ok(m.layout.prefix_len()),
            Built::Memory(m) => {
                if room(m) < 2 {
                    return Err(ObjectiveError::Layout("decoder has no room for tokens after its memories".into()));
                }
                Ok(m.layout.prefix_len() + room(m))
            }
        }
    }

    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        Ok(vec![make_causal_batch(tokens, batch, specials(model), Self::prefix_len(model))])
    }
}

/// Reconstruction of the encoder window from its embedding.
#[derive(Debug, Default)]
pub struct AutoencodeTask;

impl Task for AutoencodeTask {
    fn name(&self) -> &str {
        "autoencode"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        match model {
            Built::Autoencoder(a) if a.encoder.is_some() => Ok(a.n_positions()),
            _ => Err(unsupported(self.name(), model)),
        }
    }

    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        Ok(vec![make_autoencode_batch(tokens, batch, specials(model))])
    }
}

/// Copy of the first half after a delimiter. Memory models see the half
/// only through their memories.
#[derive(Debug, Default)]
pub struct CopyTask;

impl Task for CopyTask {
    fn name(&self) -> &str {
        "copy"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        match model {
            Built::Decoder(n) if decoder_copy_half(n.n_ctx()) >= 1 => Ok(2 * decoder_copy_half(n.n_ctx())),
            Built::Memory(_) => match encoded_memory(model) {
                Some(m) if room(m) >= 4 => Ok(2 * m.layout.prefix_len()),
                _ => Err(unsupported(self.name(), model)),
            },
            _ => Err(unsupported(self.name(), model)),
        }
    }

    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        let b = match (model, encoded_memory(model)) {
            (Built::Decoder(n), _) => make_copy_batch(tokens, batch, specials(model), false, n.n_ctx())?,
            (_, Some(m)) => make_copy_batch(tokens, batch, specials(model), true, room(m))?,
            _ => return Err(unsupported(self.name(), model)),
        };
        Ok(vec![b])
    }
}

/// Reconstruction of the memory prefix at blank inputs.
#[derive(Debug, Default)]
pub struct BlankCopyTask;

impl Task for BlankCopyTask {
    fn name(&self) -> &str {
        "blank_copy"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        match encoded_memory(model) {
            Some(m) if room(m) >= 4 => Ok(2 * m.layout.prefix_len()),
            _ => Err(unsupported(self.name(), model)),
        }
    }

    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        let m = encoded_memory(model).ok_or_else(|| unsupported(self.name(), model))?;
        Ok(vec![make_blank_copy_batch(tokens, batch, specials(model), m.layout.prefix_len(), room(m))?])
    }
}

/// Causal prediction on `X` plus copy of `X`'s first part, weighted.
#[derive(Debug)]
pub struct CombinedTask {
    pub weights: [f64; 2],
}

impl Default for CombinedTask {
    fn default() -> Self {
        Self { weights: default_weights() }
    }
}

impl Task for CombinedTask {
    fn name(&self) -> &str {
        "combined"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        let causal = CausalTask.window(model)?;
        let copy = CopyTask.window(model)?;
        Ok(causal.max(copy))
    }

    fn batches(&self, model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        let causal_len = CausalTask.window(model)?;
        let causal = make_causal_batch(&sub_rows(tokens, batch, causal_len), batch, specials(model), CausalTask::prefix_len(model));
        let n = tokens.len() / batch;
        let copy = match (model, encoded_memory(model)) {
            (Built::Decoder(net), _) => {
                let h = decoder_copy_half(net.n_ctx());
                let halves: Vec<&[TokenId]> = tokens.chunks(n).map(|r| &r[..h]).collect();
                copy_from_halves(&halves, specials(model), false, net.n_ctx())
            }
            (_, Some(m)) => {
                // Same prefix as the causal batch, so the encoding is shared.
                let halves: Vec<&[TokenId]> = tokens.chunks(n).map(|r| &r[..m.layout.prefix_len()]).collect();
                copy_from_halves(&halves, specials(model), true, room(m))
            }
            _ => return Err(unsupported(self.name(), model)),
        };
        Ok(vec![causal, copy])
    }

    fn weights(&self) -> Vec<f64> {
        self.weights.to_vec()
    }
}

/// Contrastive retrieval: a document's first encoder window against its
/// second, with in-batch negatives.
#[derive(Debug)]
pub struct InfoNceTask {
    pub temperature: f64,
}

impl Default for InfoNceTask {
    fn default() -> Self {
        Self { temperature: default_temperature() }
    }
}

impl Task for InfoNceTask {
    fn name(&self) -> &str {
        "infonce"
    }

    fn window(&self, model: &Built) -> Result<usize, ObjectiveError> {
        match model {
            Built::Decoder(n) => Ok(2 * n.n_ctx()),
            Built::Autoencoder(a) => a.encoder.as_ref().map(|e| 2 * e.n_ctx()).ok_or_else(|| unsupported(self.name(), model)),
            Built::Memory(_) => Err(unsupported(self.name(), model)),
        }
    }

    fn document_aligned(&self) -> bool {
        true
    }

    fn batches(&self, _model: &Built, tokens: &[TokenId], batch: usize) -> Result<Vec<TaskBatch>, ObjectiveError> {
        Ok(vec![make_infonce_batch(tokens, batch, self.temperature)?])
    }
}

pub type TaskFactory = Arc<dyn Fn(&TaskOptions) -> Arc<dyn Task> + Send + Sync>;

/// Tasks by name.
#[derive(Default)]
pub struct TaskRegistry {
    tasks: IndexMap<String, TaskFactory>,
}

impl TaskRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register("causal", Arc::new(|_| Arc::new(CausalTask)));
        r.register("autoencode", Arc::new(|_| Arc::new(AutoencodeTask)));
        r.register("copy", Arc::new(|_| Arc::new(CopyTask)));
        r.register("blank_copy", Arc::new(|_| Arc::new(BlankCopyTask)));
        r.register("combined", Arc::new(|o| Arc::new(CombinedTask { weights: o.combined_weights })));
        r.register("infonce", Arc::new(|o| Arc::new(InfoNceTask { temperature: o.temperature })));
        r
    }

    /// Adds or replaces a task.
    pub fn register(&mut self, name: &str, factory: TaskFactory) {
        self.tasks.insert(name.to_string(), factory);
    }

    pub fn get(&self, name: &str, options: &TaskOptions) -> Result<Arc<dyn Task>, ObjectiveError> {
        self.tasks.get(name).map(|f| f(options)).ok_or_else(|| ObjectiveError::UnknownTask {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }
}

impl Debug for TaskRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tasks.keys()).finish()
    }
}

fn registry() -> &'static RwLock<TaskRegistry> {
    static REGISTRY: OnceLock<RwLock<TaskRegistry>> = OnceLock::new();
    REGISTRY.get_or_init(|| RwLock::new(TaskRegistry::with_defaults()))
}

pub fn register_task(name: &str, factory: TaskFactory) {
    registry().write().expect("task registry poisoned").register(name, factory);
}

pub fn lookup_task(name: &str, options: &TaskOptions) -> Result<Arc<dyn Task>, ObjectiveError> {
    registry().read().expect("task registry poisoned").get(name, options)
}

pub fn task_names() -> Vec<String> {
    registry().read().expect("task registry poisoned").names()
}
