//! Analytic inference cost of chunked memory models.
//!
//! Encoding `s` chunks of `n/s` tokens costs `s·(n/s)² = n²/s` attention
//! work; the decoder attends over `s` memories for `s²`. Constant factors
//! are dropped throughout.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("context length must be at least 1")]
    EmptyContext,
    #[error("{s} chunks cannot split a {n}-token context")]
    TooManyChunks { n: usize, s: usize },
}

/// Chunk count balancing encoder against decoder work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChunkPlan {
    pub n: usize,
    /// `n^{2/3}`.
    pub real: f64,
    /// `real` rounded half-up.
    pub rounded: usize,
    /// Integer minimizer of `max(n²/s, s²)`.
    pub s: usize,
}

/// `max(n²/s, s²)·s = max(n², s³)` compared across chunk counts without
/// rounding: `f(a) < f(b)` iff `max(n², a³)·b < max(n², b³)·a`.
fn cost_numerator(n: u128, s: u128) -> u128 {
    (n * n).max(s * s * s)
}

fn less(n: u128, a: u128, b: u128) -> bool {
    cost_numerator(n, a) * b < cost_numerator(n, b) * a
}

/// The compute-optimal number of chunks for an `n`-token context.
///
/// The real optimum is `n^{2/3}`. The integer answer is whichever of its
/// floor and ceiling has the smaller `max(n²/s, s²)`; on a tie the larger
/// wins. That is not always the rounded value (n = 1024: 101.59 rounds to
/// 102, but 101 costs less).
pub fn optimal_chunks(n: usize) -> Result<ChunkPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::EmptyContext);
    }
    let real = (n as f64).powf(2.0 / 3.0);
    let nn = n as u128;
    // Integer cube root of n², corrected for float error.
    let mut lo = real.floor() as u128;
    while lo > 1 && lo * lo * lo > nn * nn {
        lo -= 1;
    }
    while (lo + 1) * (lo + 1) * (lo + 1) <= nn * nn {
        lo += 1;
    }
    let lo = lo.max(1);
    let hi = (lo + 1).min(nn);
    let s = if less(nn, lo, hi) { lo } else { hi };
    Ok(ChunkPlan { n, real, rounded: (real + 0.5).floor() as usize, s: s as usize })
}

/// Costs of one chunking choice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub n: usize,
    pub s: usize,
    pub chunk_len: f64,
    /// `s·(n/s)² = n²/s`.
    pub encoder_cost: f64,
    /// `s²`.
    pub decoder_cost: f64,
    /// Per-chunk encoder work when chunks run in parallel, `(n/s)²`.
    pub parallel_encoder_cost: f64,
    pub total_cost: f64,
    /// Full-context attention, `n²`.
    pub full_context_cost: f64,
    /// Cache elements read per generated token, `s·d`.
    pub cache_loads_per_token: f64,
    /// The same for a full-context model, `n·d`.
    pub full_cache_loads_per_token: f64,
    /// Set when `s` does not divide `n`.
    pub warning: Option<String>,
}

/// One row per `s`, in the order given.
pub fn cost_table(n: usize, d_model: usize, chunks: &[usize]) -> Result<Vec<CostBreakdown>, PlanError> {
    if n == 0 {
        return Err(PlanError::EmptyContext);
    }
    let nf = n as f64;
    let d = d_model as f64;
    chunks
        .iter()
        .map(|&s| {
            if s == 0 || s > n {
                return Err(PlanError::TooManyChunks { n, s });
            }
            let sf = s as f64;
            let chunk_len = nf / sf;
            let warning = (n % s != 0).then(|| {
                log::warn!("{s} chunks leave uneven chunks of {chunk_len:.2} tokens");
                format!("chunks of {chunk_len:.2} tokens are uneven")
            });
            Ok(CostBreakdown {
                n,
                s,
                chunk_len,
                encoder_cost: nf * nf / sf,
                decoder_cost: sf * sf,
                parallel_encoder_cost: chunk_len * chunk_len,
                total_cost: nf * nf / sf + sf * sf,
                full_context_cost: nf * nf,
                cache_loads_per_token: sf * d,
                full_cache_loads_per_token: nf * d,
                warning,
            })
        })
        .collect()
}

/// Tab-separated table with a header row.
pub fn to_tsv(rows: &[CostBreakdown]) -> String {
    let mut out = String::from(
        "n\ts\tchunk_len\tencoder_cost\tdecoder_cost\tparallel_encoder_cost\ttotal_cost\tfull_context_cost\tcache_loads_per_token\tfull_cache_loads_per_token\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.n,
            r.s,
            r.chunk_len,
            r.encoder_cost,
            r.decoder_cost,
            r.parallel_encoder_cost,
            r.total_cost,
            r.full_context_cost,
            r.cache_loads_per_token,
            r.full_cache_loads_per_token
        ));
    }
    out
}
