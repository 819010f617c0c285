//! Memory models: a decoder that reads memory embeddings in place of the
//! tokens they summarize.
//!
//! * **parallel**: the prefix is cut into `s` chunks of `chunk_len` tokens;
//!   each chunk is encoded independently into one vector.
//! * **oracle**: the whole prefix is encoded into a single vector.
//! * **recurrent**: no encoder; the decoder itself writes one memory per
//!   segment, which is read at the start of the next segment.
//!
//! Encoder outputs are mapped to decoder width by `memory_proj`. With
//! `ones_control` the encoder is skipped and a vector of ones is projected
//! instead, so memories carry no information about the input.

use serde::{Deserialize, Serialize};

use super::{ArchError, Init, ModelConfig, Network, ParamSpec};
use crate::corpus::{TokenId, SPECIAL_COUNT};
use crate::numerics::{Expr, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Memory `j` always occupies decoder slot `j`; absent chunks become pad.
    #[default]
    Fixed,
    /// Present memories are packed at the front, tokens follow immediately.
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MemoryVariant {
    #[default]
    Parallel,
    Recurrent,
    Oracle,
}

/// Chunk geometry and wiring of a memory model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLayout {
    /// Number of chunks (parallel) or segments (recurrent).
    pub s: usize,
    pub chunk_len: usize,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub variant: MemoryVariant,
    /// Absent for the recurrent variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<ModelConfig>,
    pub decoder: ModelConfig,
    #[serde(default)]
    pub encoder_frozen: bool,
    #[serde(default)]
    pub ones_control: bool,
}

impl MemoryLayout {
    pub fn prefix_len(&self) -> usize {
        self.s * self.chunk_len
    }

    /// Memories per example.
    pub fn memories_per_row(&self) -> usize {
        match self.variant {
            MemoryVariant::Parallel => self.s,
            MemoryVariant::Oracle | MemoryVariant::Recurrent => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.s == 0 || self.chunk_len == 0 {
            return Err(ArchError::Config("memory layout needs s ≥ 1 and chunk_len ≥ 1".into()));
        }
        self.decoder.validate()?;
        match (self.variant, &self.encoder) {
            (MemoryVariant::Recurrent, Some(_)) => {
                Err(ArchError::Config("the recurrent variant has no encoder; remove `encoder`".into()))
            }
            (MemoryVariant::Recurrent, None) => {
                if self.decoder.n_ctx < self.chunk_len + 2 {
                    return Err(ArchError::Config(format!(
                        "recurrent decoder needs n_ctx ≥ chunk_len + 2 = {}, has {}",
                        self.chunk_len + 2,
                        self.decoder.n_ctx
                    )));
                }
                Ok(())
            }
            (_, None) => Err(ArchError::Config("parallel and oracle memory models need an `encoder`".into())),
            (v, Some(enc)) => {
                enc.validate()?;
                let need = if v == MemoryVariant::Oracle { self.prefix_len() } else { self.chunk_len };
                if enc.n_ctx < need {
                    return Err(ArchError::Config(format!("encoder n_ctx {} is shorter than its input of {need} tokens", enc.n_ctx)));
                }
                if enc.vocab_size != self.decoder.vocab_size {
                    return Err(ArchError::DimensionMismatch {
                        what: "encoder vocabulary vs decoder vocabulary".into(),
                        expected: self.decoder.vocab_size,
                        found: enc.vocab_size,
                    });
                }
                Ok(())
            }
        }
    }
}

/// One decoder input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    /// The `j`-th memory of this row.
    Memory(usize),
}

/// Projected memories of a batch.
#[derive(Debug, Clone)]
pub struct Memories {
    /// `[B · per_row, d_decoder]`, row `b · per_row + j` is memory `j` of example `b`.
    pub node: NodeId,
    /// Pre-projection encoder outputs `[B · per_row, d_encoder]` (ones under the control).
    pub raw: NodeId,
    pub batch: usize,
    pub per_row: usize,
    /// False where the source chunk was entirely pad.
    pub present: Vec<bool>,
}

/// Decoder rows with the index where each row's non-memory part begins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderRows {
    pub slots: Vec<Vec<Slot>>,
    pub tail_start: Vec<usize>,
}

impl DecoderRows {
    pub fn len(&self) -> usize {
        self.slots.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MemoryModel {
    pub layout: MemoryLayout,
    pub encoder: Option<Network>,
    pub decoder: Network,
}

const PROJ: &str = "memory_proj";
const INIT_MEMORY: &str = "recurrent.init_memory";
const WRITE_SLOT: &str = "recurrent.write_slot";

impl MemoryModel {
    pub fn new(layout: MemoryLayout) -> Result<Self, ArchError> {
        layout.validate()?;
        let encoder = match (&layout.encoder, layout.ones_control) {
            (Some(cfg), false) => Some(Network::new(cfg.clone(), "encoder", false)?),
            _ => None,
        };
        let decoder = Network::new(layout.decoder.clone(), "decoder", true)?;
        Ok(Self { layout, encoder, decoder })
    }

    pub fn pad(&self) -> TokenId {
        (self.decoder.cfg.vocab_size - SPECIAL_COUNT) as TokenId
    }

    fn d_encoder(&self) -> usize {
        self.layout.encoder.as_ref().map_or(self.decoder.d_model(), |e| e.d_model)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.decoder.d_model();
        let mut specs = self.encoder.as_ref().map(Network::param_specs).unwrap_or_default();
        if self.layout.variant == MemoryVariant::Recurrent {
            specs.push(ParamSpec::new(INIT_MEMORY, &[1, d], Init::Normal(0.02)));
            specs.push(ParamSpec::new(WRITE_SLOT, &[1, d], Init::Normal(0.02)));
        } else {
            specs.push(ParamSpec::linear(format!("{PROJ}.w"), self.d_encoder(), d));
            specs.push(ParamSpec::new(format!("{PROJ}.b"), &[d], Init::Zeros));
        }
        specs.extend(self.decoder.param_specs());
        specs
    }

    /// Closed form: encoder + decoder + `(d_enc + 1)·d_dec` for the
    /// projection, or `2·d_dec` for the recurrent slots.
    pub fn param_count(&self) -> usize {
        let d = self.decoder.d_model();
        let glue = if self.layout.variant == MemoryVariant::Recurrent { 2 * d } else { (self.d_encoder() + 1) * d };
        self.encoder.as_ref().map_or(0, Network::param_count) + glue + self.decoder.param_count()
    }

    /// Encodes prefixes (`prefix` is `B × s·chunk_len`, row-major) into
    /// projected memories.
    pub fn memories(&self, g: &mut Expr, prefix: &[TokenId], batch: usize) -> Result<Memories, ArchError> {
        let l = &self.layout;
        if l.variant == MemoryVariant::Recurrent {
            return Err(ArchError::Config("recurrent memory models write memories inside the decoder".into()));
        }
        if batch == 0 || prefix.len() != batch * l.prefix_len() {
            return Err(ArchError::PrefixLength { expected: l.prefix_len(), found: prefix.len() / batch.max(1) });
        }
        let pad = self.pad();
        let (unit, per_row) = match l.variant {
            MemoryVariant::Oracle => (l.prefix_len(), 1),
            _ => (l.chunk_len, l.s),
        };
        let units: Vec<&[TokenId]> = prefix.chunks(unit).collect();
        let present: Vec<bool> = units.iter().map(|u| u.iter().any(|&t| t != pad)).collect();
        let d_enc = self.d_encoder();
        let raw = match &self.encoder {
            None => g.constant(&Tensor::<f64>::ones(&[batch * per_row, d_enc])),
            Some(enc) => {
                let n = enc.n_ctx();
                let mut ids = Vec::with_capacity(units.len() * n);
                for u in &units {
                    ids.extend(u.iter().map(|&t| t as usize));
                    ids.extend(std::iter::repeat(pad as usize).take(n - u.len()));
                }
                enc.encode(g, &ids, units.len())?
            }
        };
        let w = g.input(&format!("{PROJ}.w"), &[d_enc, self.decoder.d_model()])?;
        let b = g.input(&format!("{PROJ}.b"), &[self.decoder.d_model()])?;
        let node = g.affine(raw, w, b)?;
        Ok(Memories { node, raw, batch, per_row, present })
    }

    /// Memory slots of example `b` followed by `tail`, per the placement
    /// policy. Returns the slots and where the tail starts.
    fn row(&self, mem: &Memories, b: usize, tail: &[Slot]) -> (Vec<Slot>, usize) {
        let pad = self.pad();
        let present = &mem.present[b * mem.per_row..(b + 1) * mem.per_row];
        let mut row: Vec<Slot> = match self.layout.placement {
            Placement::Fixed => {
                present.iter().enumerate().map(|(j, &p)| if p { Slot::Memory(j) } else { Slot::Token(pad) }).collect()
            }
            Placement::Variable => (0..mem.per_row).filter(|&j| present[j]).map(Slot::Memory).collect(),
        };
        let start = row.len();
        row.extend_from_slice(tail);
        (row, start)
    }

    /// Assembles one decoder row per example; shorter rows (variable
    /// placement) are right-padded.
    pub fn rows(&self, mem: &Memories, tails: &[Vec<Slot>]) -> DecoderRows {
        let (mut slots, tail_start): (Vec<_>, Vec<_>) =
            tails.iter().enumerate().map(|(b, t)| self.row(mem, b, t)).unzip();
        let width = slots.iter().map(Vec::len).max().unwrap_or(0);
        for r in &mut slots {
            r.resize(width, Slot::Token(self.pad()));
        }
        DecoderRows { slots, tail_start }
    }

    /// Decoder input vectors `[B, m, d]` gathered from the memories and the
    /// decoder token table.
    pub fn decoder_inputs(&self, g: &mut Expr, mem: Option<&Memories>, rows: &DecoderRows) -> Result<NodeId, ArchError> {
        let batch = rows.slots.len();
        let m = rows.len();
        if batch == 0 || m == 0 {
            return Err(ArchError::EmptyInput);
        }
        let wte = self.decoder.wte(g)?;
        let (pool, offset) = match mem {
            Some(mem) => (g.concat(&[mem.node, wte], 0)?, mem.batch * mem.per_row),
            None => (wte, 0),
        };
        let per_row = mem.map_or(0, |m| m.per_row);
        let mut idx = Vec::with_capacity(batch * m);
        for (b, row) in rows.slots.iter().enumerate() {
            for slot in row {
                idx.push(match *slot {
                    Slot::Token(t) => offset + t as usize,
                    Slot::Memory(j) => {
                        if mem.is_none() || j >= per_row {
                            return Err(ArchError::Config(format!("memory slot {j} requested but only {per_row} available")));
                        }
                        b * per_row + j
                    }
                });
            }
        }
        Ok(g.gather(pool, idx, &[batch, m])?)
    }

    /// Decoder logits `[B, m, V]` for assembled rows.
    pub fn decoder_logits(&self, g: &mut Expr, mem: Option<&Memories>, rows: &DecoderRows) -> Result<NodeId, ArchError> {
        let x = self.decoder_inputs(g, mem, rows)?;
        let h = self.decoder.hidden(g, x)?;
        self.decoder.logits(g, h)
    }

    /// Segment-recurrent forward. `segments` holds `B` rows of `K` segments
    /// of `chunk_len` tokens each, row-major. Segment `k` is decoded from
    /// `[memory_{k−1}, tokens…, write_slot]`; `memory_k` is the final hidden
    /// state at the write slot, and `memory_0` is learned. Returns, per
    /// segment, logits `[B, chunk_len, V]` where position `i` predicts token
    /// `i` of that segment.
    pub fn recurrent_logits(&self, g: &mut Expr, segments: &[TokenId], batch: usize) -> Result<Vec<NodeId>, ArchError> {
        if self.layout.variant != MemoryVariant::Recurrent {
            return Err(ArchError::Config("recurrent_logits needs the recurrent variant".into()));
        }
        let c = self.layout.chunk_len;
        if batch == 0 || segments.is_empty() || segments.len() % (batch * c) != 0 {
            return Err(ArchError::EmptyInput);
        }
        let k_total = segments.len() / (batch * c);
        let d = self.decoder.d_model();
        let init = g.input(INIT_MEMORY, &[1, d])?;
        let write = g.input(WRITE_SLOT, &[1, d])?;
        let mut memory = g.gather(init, vec![0; batch], &[batch, 1])?;
        let write = g.gather(write, vec![0; batch], &[batch, 1])?;
        let mut out = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let ids: Vec<usize> = (0..batch)
                .flat_map(|b| {
                    let row = &segments[b * k_total * c..(b + 1) * k_total * c];
                    row[k * c..(k + 1) * c].iter().map(|&t| t as usize)
                })
                .collect();
            let tokens = self.decoder.embed(g, &ids, batch)?;
            let x = g.concat(&[memory, tokens, write], 1)?;
            let h = self.decoder.hidden(g, x)?;
            let read = g.slice(h, 1, 0, c)?;
            out.push(self.decoder.logits(g, read)?);
            memory = g.slice(h, 1, c + 1, 1)?;
        }
        Ok(out)
    }
}
