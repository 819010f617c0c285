use serde::{Deserialize, Serialize};

use super::{ArchError, ModelConfig, Network, ParamSpec, Unroll, UnrollGeometry};
use crate::numerics::{Expr, NodeId};

/// Encoder → single embedding → unroll → decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub encoder: ModelConfig,
    pub decoder: ModelConfig,
    /// Unroll window width; defaults to half the encoder width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll_window: Option<usize>,
}

/// Reconstructs a token window from one embedding of it.
///
/// The embedding comes either from an encoder network (`encoder.*`) or, for
/// imported embedding files, is supplied directly. The decoder (`decoder.*`)
/// reads `n` unrolled vectors (`unroll.*`), where `n` is the encoder context,
/// and predicts the original token at every position.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Option<Network>,
    pub unroll: Unroll,
    pub decoder: Network,
}

impl Autoencoder {
    pub fn new(cfg: &AutoencoderConfig) -> Result<Self, ArchError> {
        let encoder = Network::new(cfg.encoder.clone(), "encoder", false)?;
        let mut ae = Self::for_embeddings(cfg.encoder.d_model, cfg.encoder.n_ctx, cfg.decoder.clone(), cfg.unroll_window)?;
        if cfg.encoder.vocab_size != cfg.decoder.vocab_size {
            return Err(ArchError::DimensionMismatch {
                what: "decoder vocabulary vs encoder vocabulary".into(),
                expected: cfg.encoder.vocab_size,
                found: cfg.decoder.vocab_size,
            });
        }
        ae.encoder = Some(encoder);
        Ok(ae)
    }

    /// Decoder and unroll for externally supplied `d`-dimensional embeddings
    /// of `n`-token windows.
    pub fn for_embeddings(d: usize, n: usize, decoder: ModelConfig, window: Option<usize>) -> Result<Self, ArchError> {
        let decoder = Network::new(decoder, "decoder", true)?.without_token_table();
        if n > decoder.n_ctx() {
            return Err(ArchError::DimensionMismatch {
                what: "decoder context for unrolled rows".into(),
                expected: n,
                found: decoder.n_ctx(),
            });
        }
        let geometry = match window {
            Some(w) => UnrollGeometry::with_window(d, n, w)?,
            None => UnrollGeometry::for_dims(d, n)?,
        };
        let unroll = Unroll::new(geometry, decoder.d_model(), "unroll");
        Ok(Self { encoder: None, unroll, decoder })
    }

    /// Number of reconstructed positions.
    pub fn n_positions(&self) -> usize {
        self.unroll.geometry.n
    }

    pub fn embedding_dim(&self) -> usize {
        self.unroll.geometry.d
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.as_ref().map(Network::param_specs).unwrap_or_default();
        specs.extend(self.unroll.param_specs());
        specs.extend(self.decoder.param_specs());
        specs
    }

    pub fn param_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, Network::param_count) + self.unroll.param_count() + self.decoder.param_count()
    }

    /// Embeddings `[B, d]` of token rows (`ids` is `B × n`, row-major).
    pub fn embed(&self, g: &mut Expr, ids: &[usize], batch: usize) -> Result<NodeId, ArchError> {
        let enc = self.encoder.as_ref().ok_or_else(|| ArchError::Config("autoencoder has no encoder".into()))?;
        enc.encode(g, ids, batch)
    }

    /// Reconstruction logits `[B, n, V]` from embeddings `[B, d]`.
    pub fn decode(&self, g: &mut Expr, embedding: NodeId) -> Result<NodeId, ArchError> {
        let x = self.unroll.forward(g, embedding)?;
        let h = self.decoder.hidden(g, x)?;
        self.decoder.logits(g, h)
    }

    pub fn forward(&self, g: &mut Expr, ids: &[usize], batch: usize) -> Result<NodeId, ArchError> {
        let e = self.embed(g, ids, batch)?;
        self.decode(g, e)
    }
}
