use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::family::{final_norm, lookup_family, param, scoped, ModelFamily};
use super::{ArchError, Init, ParamSpec};
use crate::numerics::{Expr, NodeId};

fn default_ff_mult() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Hyperparameters of one encoder or decoder network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Registered family name, e.g. `"mixer"` or `"transformer"`.
    pub family: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_ctx: usize,
    /// Attention heads (transformer only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub vocab_size: usize,
    /// MLP hidden width as a multiple of `d_model`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Causal masking of cross-position mixing.
    #[serde(default = "default_true")]
    pub causal: bool,
}

impl ModelConfig {
    pub fn mixer(d_model: usize, n_layers: usize, n_ctx: usize, vocab_size: usize) -> Self {
        Self { family: "mixer".into(), d_model, n_layers, n_ctx, heads: None, vocab_size, ff_mult: 4, causal: true }
    }

    pub fn transformer(d_model: usize, n_layers: usize, n_ctx: usize, heads: usize, vocab_size: usize) -> Self {
        Self {
            family: "transformer".into(),
            d_model,
            n_layers,
            n_ctx,
            heads: Some(heads),
            vocab_size,
            ff_mult: 4,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let fam = lookup_family(&self.family)?;
        if self.n_ctx < 2 {
            return Err(ArchError::Config(format!("n_ctx must be at least 2, got {}", self.n_ctx)));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(ArchError::Config("d_model, n_layers and ff_mult must be positive".into()));
        }
        if self.vocab_size < 8 {
            return Err(ArchError::Config(format!("vocab_size must be at least 8, got {}", self.vocab_size)));
        }
        fam.validate(self)
    }
}

/// A network of one family: token table, body, final norm and optional
/// language-modeling head, all named under `prefix`.
///
/// Parameters: `wte [V, d]` (unless inputs are always vectors), the family body, `ln_f`, and with a head
/// `lm_head.w [d, V]`, `lm_head.b [V]`.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub prefix: String,
    pub head: bool,
    /// False when inputs always arrive as vectors (no `wte`).
    pub token_table: bool,
    family: Arc<dyn ModelFamily>,
}

impl Network {
    pub fn new(cfg: ModelConfig, prefix: impl Into<String>, head: bool) -> Result<Self, ArchError> {
        cfg.validate()?;
        let family = lookup_family(&cfg.family)?;
        Ok(Self { cfg, prefix: prefix.into(), head, token_table: true, family })
    }

    pub fn without_token_table(mut self) -> Self {
        self.token_table = false;
        self
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn n_ctx(&self) -> usize {
        self.cfg.n_ctx
    }

    pub fn name(&self, local: &str) -> String {
        scoped(&self.prefix, local)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (v, d) = (self.cfg.vocab_size, self.cfg.d_model);
        let mut specs = Vec::new();
        if self.token_table {
            specs.push(ParamSpec::new("wte", &[v, d], Init::Normal(0.02)));
        }
        specs.extend(self.family.body_specs(&self.cfg));
        specs.push(ParamSpec::new("ln_f.gamma", &[d], Init::Ones));
        specs.push(ParamSpec::new("ln_f.beta", &[d], Init::Zeros));
        if self.head {
            specs.push(ParamSpec::linear("lm_head.w", d, v));
            specs.push(ParamSpec::new("lm_head.b", &[v], Init::Zeros));
        }
        for s in &mut specs {
            s.name = self.name(&s.name);
        }
        specs
    }

    /// Closed-form parameter count: `V·d (token table) + body + 2d (+ d·V + V
    /// with head)`.
    pub fn param_count(&self) -> usize {
        let (v, d) = (self.cfg.vocab_size, self.cfg.d_model);
        let table = if self.token_table { v * d } else { 0 };
        let head = if self.head { d * v + v } else { 0 };
        table + self.family.body_param_count(&self.cfg) + 2 * d + head
    }

    /// The token table node `[V, d]`.
    pub fn wte(&self, g: &mut Expr) -> Result<NodeId, ArchError> {
        if !self.token_table {
            return Err(ArchError::Config(format!("network `{}` has no token table", self.prefix)));
        }
        param(g, &self.prefix, "wte", &[self.cfg.vocab_size, self.cfg.d_model])
    }

    /// Token embeddings `[batch, len, d]` of row-major `ids`.
    pub fn embed(&self, g: &mut Expr, ids: &[usize], batch: usize) -> Result<NodeId, ArchError> {
        if batch == 0 || ids.is_empty() {
            return Err(ArchError::EmptyInput);
        }
        let len = ids.len() / batch;
        let wte = self.wte(g)?;
        Ok(g.gather(wte, ids.to_vec(), &[batch, len])?)
    }

    /// Body and final norm over input vectors `x: [B, m, d]`.
    pub fn hidden(&self, g: &mut Expr, x: NodeId) -> Result<NodeId, ArchError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model || s[1] == 0 || s[1] > self.cfg.n_ctx {
            return Err(ArchError::InputShape {
                network: self.prefix.clone(),
                found: s,
                n_ctx: self.cfg.n_ctx,
                d_model: self.cfg.d_model,
            });
        }
        let h = self.family.body(g, &self.cfg, &self.prefix, x)?;
        final_norm(g, &self.prefix, self.cfg.d_model, h)
    }

    /// Logits `[B, m, V]` from hidden states.
    pub fn logits(&self, g: &mut Expr, h: NodeId) -> Result<NodeId, ArchError> {
        if !self.head {
            return Err(ArchError::Config(format!("network `{}` has no language-modeling head", self.prefix)));
        }
        let (v, d) = (self.cfg.vocab_size, self.cfg.d_model);
        let w = param(g, &self.prefix, "lm_head.w", &[d, v])?;
        let b = param(g, &self.prefix, "lm_head.b", &[v])?;
        Ok(g.affine(h, w, b)?)
    }

    /// Logits of a batch of token rows.
    pub fn forward_tokens(&self, g: &mut Expr, ids: &[usize], batch: usize) -> Result<NodeId, ArchError> {
        let x = self.embed(g, ids, batch)?;
        let h = self.hidden(g, x)?;
        self.logits(g, h)
    }

    /// Sequence embeddings `[B, d]`: the final-norm hidden state at the last
    /// position of each (already padded) row.
    pub fn encode(&self, g: &mut Expr, ids: &[usize], batch: usize) -> Result<NodeId, ArchError> {
        let x = self.embed(g, ids, batch)?;
        let h = self.hidden(g, x)?;
        let m = g.shape(h)[1];
        let last = g.slice(h, 1, m - 1, 1)?;
        Ok(g.reshape(last, &[batch, self.cfg.d_model])?)
    }
}
