use std::fmt::Debug;
use std::sync::{Arc, OnceLock, RwLock};

use indexmap::IndexMap;

use super::{ArchError, Init, ModelConfig, ParamSpec};
use crate::numerics::{Expr, NodeId, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// A sequence-model body: everything between the input vectors and the
/// final layer norm.
///
/// Implementations are registered by name (see [`register_family`]) and
/// selected through [`ModelConfig::family`].
pub trait ModelFamily: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn validate(&self, _cfg: &ModelConfig) -> Result<(), ArchError> {
        Ok(())
    }

    /// Body parameters, named relative to the network prefix.
    fn body_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec>;

    /// Closed-form body parameter count; must equal the sum over
    /// [`body_specs`](Self::body_specs).
    fn body_param_count(&self, cfg: &ModelConfig) -> usize;

    /// Maps `x: [B, m, d]` with `m ≤ n_ctx` to hidden states of the same shape.
    /// Position `i` of the output may depend on inputs `≤ i` only when
    /// `cfg.causal` is set.
    fn body(&self, g: &mut Expr, cfg: &ModelConfig, prefix: &str, x: NodeId) -> Result<NodeId, ArchError>;
}

/// Joins a parameter prefix and a local name.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn param(g: &mut Expr, prefix: &str, name: &str, shape: &[usize]) -> Result<NodeId, ArchError> {
    Ok(g.input(&scoped(prefix, name), shape)?)
}

/// Lower-triangular `m × m` mask (row attends to columns `≤ row`).
pub fn causal_mask(m: usize) -> Vec<bool> {
    (0..m * m).map(|i| i % m <= i / m).collect()
}

fn layer_norm(g: &mut Expr, prefix: &str, name: &str, d: usize, x: NodeId) -> Result<NodeId, ArchError> {
    let gamma = param(g, prefix, &format!("{name}.gamma"), &[d])?;
    let beta = param(g, prefix, &format!("{name}.beta"), &[d])?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

pub(crate) fn final_norm(g: &mut Expr, prefix: &str, d: usize, x: NodeId) -> Result<NodeId, ArchError> {
    layer_norm(g, prefix, "ln_f", d, x)
}

fn linear(g: &mut Expr, prefix: &str, name: &str, fan_in: usize, fan_out: usize, x: NodeId) -> Result<NodeId, ArchError> {
    let w = param(g, prefix, &format!("{name}.w"), &[fan_in, fan_out])?;
    let b = param(g, prefix, &format!("{name}.b"), &[fan_out])?;
    Ok(g.affine(x, w, b)?)
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(ParamSpec::new(format!("{name}.gamma"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{name}.beta"), &[d], Init::Zeros));
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::linear(format!("{name}.w"), fan_in, fan_out));
    out.push(ParamSpec::new(format!("{name}.b"), &[fan_out], Init::Zeros));
}

fn mlp_specs(out: &mut Vec<ParamSpec>, p: &str, cfg: &ModelConfig) {
    let (d, f) = (cfg.d_model, cfg.d_model * cfg.ff_mult);
    norm_specs(out, &format!("{p}.ln2"), d);
    linear_specs(out, &format!("{p}.fc1"), d, f);
    linear_specs(out, &format!("{p}.fc2"), f, d);
}

/// `h + FC2(GELU(FC1(LN2(h))))`
fn mlp_residual(g: &mut Expr, prefix: &str, p: &str, cfg: &ModelConfig, h: NodeId) -> Result<NodeId, ArchError> {
    let (d, f) = (cfg.d_model, cfg.d_model * cfg.ff_mult);
    let z = layer_norm(g, prefix, &format!("{p}.ln2"), d, h)?;
    let z = linear(g, prefix, &format!("{p}.fc1"), d, f, z)?;
    let z = g.gelu(z)?;
    let z = linear(g, prefix, &format!("{p}.fc2"), f, d, z)?;
    Ok(g.add(h, z)?)
}

fn mlp_param_count(cfg: &ModelConfig) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_model * cfg.ff_mult);
    2 * d + (d * f + f) + (f * d + d)
}

/// Masked mixer: attention is replaced by a trainable `n × n` mixing matrix
/// applied across the sequence axis.
///
/// Block `l`, for `x: [B, m, d]`:
///
/// ```text
/// h = x + (W ⊙ M)[:m, :m] · LN1(x) + c[:m]
/// y = h + FC2(GELU(FC1(LN2(h))))
/// ```
///
/// `W` is `n_ctx × n_ctx`, `c` a per-position bias broadcast over channels,
/// and `M` the lower-triangular mask when causal (all ones otherwise). The
/// mixing matrix is shared by all channels, like a kernel-size-1 convolution
/// over positions. No position embedding is needed: `W` is position-aware.
///
/// Parameters per block: `n² + n + 4d + 2·d·f + f + d` with `f = ff_mult·d`.
#[derive(Debug)]
pub struct MaskedMixer;

impl ModelFamily for MaskedMixer {
    fn name(&self) -> &'static str {
        "mixer"
    }

    fn body_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let (n, d) = (cfg.n_ctx, cfg.d_model);
        let bound = 1.0 / (n as f64).sqrt();
        let mut out = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("blocks.{l}");
            norm_specs(&mut out, &format!("{p}.ln1"), d);
            out.push(ParamSpec::new(format!("{p}.mix.w"), &[n, n], Init::Uniform(bound)));
            out.push(ParamSpec::new(format!("{p}.mix.b"), &[n, 1], Init::Uniform(bound)));
            mlp_specs(&mut out, &p, cfg);
        }
        out
    }

    fn body_param_count(&self, cfg: &ModelConfig) -> usize {
        let (n, d) = (cfg.n_ctx, cfg.d_model);
        cfg.n_layers * (2 * d + n * n + n + mlp_param_count(cfg))
    }

    fn body(&self, g: &mut Expr, cfg: &ModelConfig, prefix: &str, mut x: NodeId) -> Result<NodeId, ArchError> {
        let (n, d) = (cfg.n_ctx, cfg.d_model);
        let m = g.shape(x)[1];
        let mask = cfg.causal.then(|| g.constant(&Tensor::<f64>::from_fn(&[m, m], |i| f64::from(u8::from(i % m <= i / m)))));
        for l in 0..cfg.n_layers {
            let p = format!("blocks.{l}");
            let y = layer_norm(g, prefix, &format!("{p}.ln1"), d, x)?;
            let mut w = param(g, prefix, &format!("{p}.mix.w"), &[n, n])?;
            let mut c = param(g, prefix, &format!("{p}.mix.b"), &[n, 1])?;
            if m < n {
                w = g.slice(w, 0, 0, m)?;
                w = g.slice(w, 1, 0, m)?;
                c = g.slice(c, 0, 0, m)?;
            }
            if let Some(mask) = mask {
                w = g.mul(w, mask)?;
            }
            let mixed = g.matmul(w, y)?;
            let h = g.add(x, mixed)?;
            let h = g.add(h, c)?;
            x = mlp_residual(g, prefix, &p, cfg, h)?;
        }
        Ok(x)
    }
}

/// Pre-norm transformer with learned absolute position embeddings (`wpe`)
/// and multi-head scaled dot-product attention.
///
/// Parameters: `n·d` for `wpe` plus, per block, `4d² + 4d` for attention,
/// `4d` for the two norms and `2·d·f + f + d` for the MLP.
#[derive(Debug)]
pub struct Transformer;

impl ModelFamily for Transformer {
    fn name(&self) -> &'static str {
        "transformer"
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), ArchError> {
        let heads = cfg.heads.unwrap_or(0);
        if heads == 0 || cfg.d_model % heads != 0 {
            return Err(ArchError::Config(format!(
                "transformer needs heads ≥ 1 dividing d_model {}, got {:?}",
                cfg.d_model, cfg.heads
            )));
        }
        Ok(())
    }

    fn body_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let d = cfg.d_model;
        let mut out = vec![ParamSpec::new("wpe", &[cfg.n_ctx, d], Init::Normal(0.02))];
        for l in 0..cfg.n_layers {
            let p = format!("blocks.{l}");
            norm_specs(&mut out, &format!("{p}.ln1"), d);
            linear_specs(&mut out, &format!("{p}.attn.qkv"), d, 3 * d);
            linear_specs(&mut out, &format!("{p}.attn.proj"), d, d);
            mlp_specs(&mut out, &p, cfg);
        }
        out
    }

    fn body_param_count(&self, cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        cfg.n_ctx * d + cfg.n_layers * (2 * d + 4 * d * d + 4 * d + mlp_param_count(cfg))
    }

    fn body(&self, g: &mut Expr, cfg: &ModelConfig, prefix: &str, x: NodeId) -> Result<NodeId, ArchError> {
        let (n, d) = (cfg.n_ctx, cfg.d_model);
        let heads = cfg.heads.unwrap_or(1);
        let dh = d / heads;
        let shape = g.shape(x).to_vec();
        let (b, m) = (shape[0], shape[1]);
        let mut wpe = param(g, prefix, "wpe", &[n, d])?;
        if m < n {
            wpe = g.slice(wpe, 0, 0, m)?;
        }
        let mut x = g.add(x, wpe)?;
        let mask = causal_mask(m);
        for l in 0..cfg.n_layers {
            let p = format!("blocks.{l}");
            let y = layer_norm(g, prefix, &format!("{p}.ln1"), d, x)?;
            let qkv = linear(g, prefix, &format!("{p}.attn.qkv"), d, 3 * d, y)?;
            let split = |g: &mut Expr, k: usize| -> Result<NodeId, ArchError> {
                let t = g.slice(qkv, 2, k * d, d)?;
                let t = g.reshape(t, &[b, m, heads, dh])?;
                Ok(g.transpose(t, 1, 2)?)
            };
            let q = split(g, 0)?;
            let k = split(g, 1)?;
            let v = split(g, 2)?;
            let scores = g.matmul_t(q, k, false, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = if cfg.causal { g.masked_softmax(scores, mask.clone(), &[m, m])? } else { g.softmax(scores)? };
            let o = g.matmul(att, v)?;
            let o = g.transpose(o, 1, 2)?;
            let o = g.reshape(o, &[b, m, d])?;
            let o = linear(g, prefix, &format!("{p}.attn.proj"), d, d, o)?;
            let h = g.add(x, o)?;
            x = mlp_residual(g, prefix, &p, cfg, h)?;
        }
        Ok(x)
    }
}

/// Name → family table.
#[derive(Debug, Default)]
pub struct FamilyRegistry {
    families: IndexMap<&'static str, Arc<dyn ModelFamily>>,
}

impl FamilyRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(MaskedMixer));
        r.register(Arc::new(Transformer));
        r
    }

    /// Adds or replaces a family.
    pub fn register(&mut self, family: Arc<dyn ModelFamily>) {
        self.families.insert(family.name(), family);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ModelFamily>, ArchError> {
        self.families.get(name).cloned().ok_or_else(|| ArchError::UnknownFamily {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.keys().copied().collect()
    }
}

fn registry() -> &'static RwLock<FamilyRegistry> {
    static REGISTRY: OnceLock<RwLock<FamilyRegistry>> = OnceLock::new();
    REGISTRY.get_or_init(|| RwLock::new(FamilyRegistry::with_defaults()))
}

/// Makes a family available to every [`ModelConfig`] by its name.
pub fn register_family(family: Arc<dyn ModelFamily>) {
    registry().write().expect("family registry poisoned").register(family);
}

pub fn lookup_family(name: &str) -> Result<Arc<dyn ModelFamily>, ArchError> {
    registry().read().expect("family registry poisoned").get(name)
}

pub fn family_names() -> Vec<&'static str> {
    registry().read().expect("family registry poisoned").names()
}
