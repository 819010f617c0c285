use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{run_training, EmbeddingSampler, TaskSampler, TokenSource, TrainConfig, TrainError, TrainJob, TrainRecord};
use crate::architectures::{Architecture, Autoencoder, AutoencoderConfig, Built, ModelConfig, Network, ParamStore};
use crate::corpus::{SpecialTokens, TokenId, HELD_OUT_FRACTION};
use crate::metrics::MetricReport;
use crate::objectives::AutoencodeTask;

fn default_true() -> bool {
    true
}

/// A retention probe: a fresh decoder trained to invert frozen embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub decoder: ModelConfig,
    pub train: TrainConfig,
    /// Train the encoder's token table while the rest stays frozen.
    #[serde(default = "default_true")]
    pub train_wte: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll_window: Option<usize>,
    /// Expected width of imported embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

/// An encoder network and its parameters under `encoder.*`.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Extracts the encoder of a checkpointed model. A decoder-only model is
/// itself the encoder (its `decoder.*` tensors are renamed and the head is
/// dropped).
pub fn encoder_from_checkpoint(arch: &Architecture, params: &ParamStore) -> Result<EncoderWeights, TrainError> {
    let (config, source_prefix) = match arch {
        Architecture::Decoder { model } => (model.clone(), "decoder."),
        Architecture::Autoencoder(cfg) => (cfg.encoder.clone(), "encoder."),
        Architecture::Memory(layout) => match (&layout.encoder, layout.ones_control) {
            (Some(e), false) => (e.clone(), "encoder."),
            _ => return Err(TrainError::Config("this memory model has no encoder".into())),
        },
    };
    let net = Network::new(config.clone(), "encoder", false)?;
    let mut out = ParamStore::default();
    for spec in net.param_specs() {
        let local = spec.name.strip_prefix("encoder.").expect("encoder names are scoped");
        let src = format!("{source_prefix}{local}");
        let t = params.get(&src).ok_or_else(|| TrainError::Config(format!("checkpoint lacks `{src}`")))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(TrainError::Config(format!("`{src}` has shape {:?}, expected {:?}", t.shape(), spec.shape)));
        }
        out.insert(spec.name, t.clone());
    }
    Ok(EncoderWeights { config, params: out })
}

pub enum ProbeSource<'a> {
    Encoder { weights: EncoderWeights, train: &'a dyn TokenSource, held_out: &'a dyn TokenSource },
    /// Imported `(ids, embedding)` records embedding `window`-token inputs;
    /// the last 5% are held out.
    Embeddings { records: &'a [(Vec<TokenId>, Vec<f32>)], window: usize },
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// Held-out evaluation with the highest entropy ratio.
    pub best: MetricReport,
    pub records: Vec<TrainRecord>,
}

/// Trains a fresh decoder (seeded by `cfg.train.seed`) to reconstruct the
/// inputs of frozen embeddings and reports the best held-out metrics.
pub fn retention_probe(
    source: ProbeSource<'_>,
    cfg: &ProbeConfig,
    out_dir: Option<PathBuf>,
    deterministic: bool,
) -> Result<ProbeOutcome, TrainError> {
    let specials = SpecialTokens::for_vocab(cfg.decoder.vocab_size);
    let outcome = match source {
        ProbeSource::Encoder { weights, train, held_out } => {
            let ae_cfg = AutoencoderConfig {
                encoder: weights.config.clone(),
                decoder: cfg.decoder.clone(),
                unroll_window: cfg.unroll_window,
            };
            let model = Built::Autoencoder(Autoencoder::new(&ae_cfg)?);
            let mut params = model.init_params(cfg.train.seed);
            for (name, t) in weights.params.iter() {
                params.insert(name, t.clone());
            }
            let mut tc = cfg.train.clone();
            tc.freeze.push("encoder.".into());
            if cfg.train_wte {
                tc.unfreeze.push("encoder.wte".into());
            }
            let train_s = TaskSampler::new(Arc::new(AutoencodeTask), &model, train)?;
            let eval_s = TaskSampler::new(Arc::new(AutoencodeTask), &model, held_out)?;
            let job = TrainJob {
                model: &model,
                config: &tc,
                model_config: serde_json::to_value(Architecture::Autoencoder(ae_cfg)).expect("config serializes"),
                train: &train_s,
                evals: vec![&eval_s],
                out_dir,
                deterministic,
                stage: None,
                step_offset: 0,
            };
            run_training(&job, params)?
        }
        ProbeSource::Embeddings { records, window } => {
            let d = records.first().map(|(_, v)| v.len()).ok_or_else(|| TrainError::Config("no embedding records".into()))?;
            if let Some(expected) = cfg.embedding_dim {
                if expected != d {
                    return Err(TrainError::EmbeddingDim { expected, found: d });
                }
            }
            if let Some((_, v)) = records.iter().find(|(_, v)| v.len() != d) {
                return Err(TrainError::EmbeddingDim { expected: d, found: v.len() });
            }
            let held = ((records.len() as f64) * HELD_OUT_FRACTION).ceil() as usize;
            if held == 0 || held >= records.len() {
                return Err(TrainError::Config(format!("{} records are too few to hold out 5%", records.len())));
            }
            let (train_r, held_r) = records.split_at(records.len() - held);
            let ae = Autoencoder::for_embeddings(d, window, cfg.decoder.clone(), cfg.unroll_window)?;
            let model = Built::Autoencoder(ae);
            let params = model.init_params(cfg.train.seed);
            let train_s = EmbeddingSampler { records: train_r, window, specials };
            let eval_s = EmbeddingSampler { records: held_r, window, specials };
            let model_config = serde_json::json!({
                "kind": "embedding_probe",
                "embedding_dim": d,
                "window": window,
                "decoder": cfg.decoder,
                "unroll_window": cfg.unroll_window,
            });
            let job = TrainJob {
                model: &model,
                config: &cfg.train,
                model_config,
                train: &train_s,
                evals: vec![&eval_s],
                out_dir,
                deterministic,
                stage: None,
                step_offset: 0,
            };
            run_training(&job, params)?
        }
    };
    let best = outcome
        .records
        .iter()
        .map(|r| r.evals[0])
        .max_by(|a, b| a.h_r.total_cmp(&b.h_r))
        .expect("training always records step 0");
    Ok(ProbeOutcome { best, records: outcome.records })
}
