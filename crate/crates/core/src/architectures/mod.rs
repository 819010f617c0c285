//! Encoder and decoder networks, the unrolling projection and memory-model
//! wirings.
//!
//! Networks are built from a [`ModelFamily`] looked up by name, so new
//! families can be registered at runtime with [`register_family`]. Every
//! builder emits nodes into an [`Expr`](crate::numerics::Expr) whose named
//! inputs are parameters; a [`ParamStore`] binds them.
//!
//! Parameter naming: `encoder.*`, `decoder.*`, `unroll.*`, `memory_proj.*`
//! and `recurrent.*`. Inside a network: `wte`, `wpe` (transformer),
//! `blocks.{l}.…`, `ln_f`, `lm_head`.

mod autoencoder;
mod checkpoint;
mod family;
mod memory;
mod network;
mod params;
mod unroll;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{Autoencoder, AutoencoderConfig};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ParamEntry, MANIFEST_FILE, PARAMS_FILE};
pub use family::{
    causal_mask, family_names, lookup_family, register_family, scoped, FamilyRegistry, MaskedMixer, ModelFamily, Transformer,
};
pub use memory::{DecoderRows, Memories, MemoryLayout, MemoryModel, MemoryVariant, Placement, Slot};
pub use network::{ModelConfig, Network};
pub use params::{Init, ParamSpec, ParamStore};
pub use unroll::{Unroll, UnrollGeometry};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown model family `{name}` (registered: {known})")]
    UnknownFamily { name: String, known: String },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: String, expected: usize, found: usize },
    #[error("network `{network}` takes [B, ≤{n_ctx}, {d_model}] inputs, got {found:?}")]
    InputShape { network: String, found: Vec<usize>, n_ctx: usize, d_model: usize },
    #[error("prefix must hold s × chunk_len = {expected} tokens per row, got {found}")]
    PrefixLength { expected: usize, found: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Any of the trainable model shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// A single decoder-only network with a language-modeling head.
    Decoder { model: ModelConfig },
    Autoencoder(AutoencoderConfig),
    Memory(MemoryLayout),
}

/// A built architecture.
#[derive(Debug, Clone)]
pub enum Built {
    Decoder(Network),
    Autoencoder(Autoencoder),
    Memory(MemoryModel),
}

impl Architecture {
    pub fn build(&self) -> Result<Built, ArchError> {
        Ok(match self {
            Architecture::Decoder { model } => Built::Decoder(Network::new(model.clone(), "decoder", true)?),
            Architecture::Autoencoder(cfg) => Built::Autoencoder(Autoencoder::new(cfg)?),
            Architecture::Memory(layout) => Built::Memory(MemoryModel::new(layout.clone())?),
        })
    }

    /// Output vocabulary `|t|`.
    pub fn vocab_size(&self) -> usize {
        match self {
            Architecture::Decoder { model } => model.vocab_size,
            Architecture::Autoencoder(cfg) => cfg.decoder.vocab_size,
            Architecture::Memory(layout) => layout.decoder.vocab_size,
        }
    }

    /// Parameter-name prefixes that are frozen by the architecture itself.
    pub fn default_frozen(&self) -> Vec<String> {
        match self {
            Architecture::Memory(l) if l.encoder_frozen => vec!["encoder.".into()],
            _ => Vec::new(),
        }
    }
}

impl Built {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Built::Decoder(n) => n.param_specs(),
            Built::Autoencoder(a) => a.param_specs(),
            Built::Memory(m) => m.param_specs(),
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            Built::Decoder(n) => n.param_count(),
            Built::Autoencoder(a) => a.param_count(),
            Built::Memory(m) => m.param_count(),
        }
    }

    /// Freshly initialized parameters from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamStore::from_specs(&self.param_specs(), &mut rng)
    }

    /// Checks that `params` holds exactly the declared names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<(), ArchError> {
        let specs = self.param_specs();
        for s in &specs {
            match params.get(&s.name) {
                None => return Err(ArchError::Checkpoint(format!("missing parameter `{}`", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(ArchError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        if params.len() != specs.len() {
            let extra = params.names().find(|n| !specs.iter().any(|s| s.name == *n)).unwrap_or_default().to_string();
            return Err(ArchError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}
