use serde::{Deserialize, Serialize};

use super::family::param;
use super::{ArchError, Init, ParamSpec};
use crate::numerics::{Expr, NodeId};

/// Window placement of the unrolling projection.
///
/// Row `i` of the output reads embedding dims `[o_i, o_i + w)` where
/// `o_i = min(i·f, d − w)` and `f = max(1, ⌊(d − w)/(n − 1)⌋)`. The final
/// window is pinned to `d − w`, so together the windows always reach the last
/// dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnrollGeometry {
    pub d: usize,
    pub n: usize,
    pub window: usize,
    pub stride: usize,
    pub offsets: Vec<usize>,
}

impl UnrollGeometry {
    /// Default window: `d/2`, or all of `d` when a single row is produced.
    pub fn for_dims(d: usize, n: usize) -> Result<Self, ArchError> {
        let window = if n == 1 { d } else { (d / 2).max(1) };
        Self::with_window(d, n, window)
    }

    pub fn with_window(d: usize, n: usize, window: usize) -> Result<Self, ArchError> {
        if n == 0 || window == 0 || d < window {
            return Err(ArchError::Config(format!("cannot unroll d = {d} into {n} windows of width {window}")));
        }
        let stride = if n == 1 { 1 } else { ((d - window) / (n - 1)).max(1) };
        let mut offsets: Vec<usize> = (0..n).map(|i| (i * stride).min(d - window)).collect();
        *offsets.last_mut().unwrap() = d - window;
        let mut covered = 0;
        for &o in &offsets {
            if o > covered {
                return Err(ArchError::Config(format!("unroll windows of width {window} leave dims {covered}..{o} unread")));
            }
            covered = covered.max(o + window);
        }
        Ok(Self { d, n, window, stride, offsets })
    }
}

/// Trainable map `R^d → R^{n × d_out}` applying one shared affine map to each
/// sliding window of the embedding.
#[derive(Debug, Clone)]
pub struct Unroll {
    pub geometry: UnrollGeometry,
    pub d_out: usize,
    pub prefix: String,
}

impl Unroll {
    pub fn new(geometry: UnrollGeometry, d_out: usize, prefix: impl Into<String>) -> Self {
        Self { geometry, d_out, prefix: prefix.into() }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::linear(format!("{}.w", self.prefix), self.geometry.window, self.d_out),
            ParamSpec::new(format!("{}.b", self.prefix), &[self.d_out], Init::Zeros),
        ]
    }

    pub fn param_count(&self) -> usize {
        (self.geometry.window + 1) * self.d_out
    }

    /// `[B, d] → [B, n, d_out]`.
    pub fn forward(&self, g: &mut Expr, embedding: NodeId) -> Result<NodeId, ArchError> {
        let s = g.shape(embedding).to_vec();
        let UnrollGeometry { d, n, window, .. } = self.geometry;
        if s.len() != 2 || s[1] != d {
            return Err(ArchError::DimensionMismatch { what: "unroll input".into(), expected: d, found: *s.last().unwrap_or(&0) });
        }
        let b = s[0];
        let flat = g.reshape(embedding, &[b * d, 1])?;
        let mut idx = Vec::with_capacity(b * n * window);
        for row in 0..b {
            for &o in &self.geometry.offsets {
                idx.extend((o..o + window).map(|k| row * d + k));
            }
        }
        let windows = g.gather(flat, idx, &[b, n, window])?;
        let windows = g.reshape(windows, &[b, n, window])?;
        let w = param(g, &self.prefix, "w", &[window, self.d_out])?;
        let bias = param(g, &self.prefix, "b", &[self.d_out])?;
        Ok(g.affine(windows, w, bias)?)
    }
}
