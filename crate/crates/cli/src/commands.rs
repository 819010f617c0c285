use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use memlab::architectures::{load_checkpoint, Architecture, Built, Network, ParamStore};
use memlab::corpus::{step_seed, TokenId, Tokenizer};
use memlab::metrics::{evaluate_model, MetricReport};
use memlab::numerics::Expr;
use memlab::objectives::{lookup_task, Task, TaskOptions};
use memlab::planner::{cost_table, optimal_chunks, to_tsv};
use memlab::training::{
    encoder_from_checkpoint, retention_probe, run_curriculum, run_training, BatchSampler, EncoderWeights, ProbeSource, Stage,
    TaskSampler, TokenSource, TrainJob, TrainOutcome, UniformTokens,
};
use serde::Serialize;

use crate::config::{write_toml, CorpusConfig, ExperimentConfig, ProbeFileConfig, ProbeSourceConfig, TokenizerConfig, RESOLVED_CONFIG};
use crate::data;
use crate::embeddings::{read_embeddings, write_embeddings, EmbeddingRecord};

pub const REPORT_FILE: &str = "report.json";

fn load_model(dir: &Path) -> Result<(Architecture, ParamStore)> {
    let (manifest, params) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let arch: Architecture = serde_json::from_value(manifest.config)
        .with_context(|| format!("{}: not a model checkpoint", dir.display()))?;
    arch.build()?.check_params(&params)?;
    Ok((arch, params))
}

fn check_vocab(tok: &Tokenizer, vocab: usize) -> Result<()> {
    ensure!(tok.vocab_size() == vocab, "tokenizer has {} tokens but the model expects {vocab}", tok.vocab_size());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `train`: fits the configured model and writes metrics, checkpoints and
/// the resolved configuration under `output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_toml(&out.join(RESOLVED_CONFIG), cfg)?;
    let corpus = data::load(&cfg.corpus, &cfg.tokenizer, out)?;
    check_vocab(&corpus.tokenizer, cfg.model.vocab_size())?;
    let model = cfg.model.build()?;
    let opts = cfg.task.options();

    let first_seed = cfg.train.as_ref().or(cfg.stages.first().map(|s| &s.train)).map_or(0, |t| t.seed);
    let mut params = match &cfg.init.checkpoint {
        Some(dir) => {
            let (_, p) = load_model(dir)?;
            model.check_params(&p)?;
            p
        }
        None => model.init_params(first_seed),
    };
    if let Some(dir) = &cfg.init.encoder_checkpoint {
        let (arch, p) = load_model(dir)?;
        let enc = encoder_from_checkpoint(&arch, &p)?;
        for (name, t) in enc.params.iter() {
            let slot = params.get_mut(name).with_context(|| format!("model has no `{name}` to take from {}", dir.display()))?;
            ensure!(slot.shape() == t.shape(), "`{name}`: checkpoint shape {:?}, model shape {:?}", t.shape(), slot.shape());
            *slot = t.clone();
        }
    }
    let frozen = cfg.model.default_frozen();
    let with_frozen = |t: &memlab::training::TrainConfig| {
        let mut t = t.clone();
        t.freeze.extend(frozen.iter().cloned());
        t
    };
    let model_config = serde_json::to_value(&cfg.model)?;
    // Extra evaluations, minus the task each run already evaluates.
    let headline = cfg.stages.last().map_or(&cfg.task.name, |s| &s.task);
    let extra: Vec<Arc<dyn Task>> =
        cfg.evals.iter().filter(|e| *e != headline).map(|e| lookup_task(e, &opts)).collect::<Result<_, _>>()?;

    if let Some(t) = &cfg.train {
        let t = with_frozen(t);
        let task = lookup_task(&cfg.task.name, &opts)?;
        let train_s = TaskSampler::new(task.clone(), &model, &corpus.train)?;
        let mut evals = vec![TaskSampler::new(task, &model, &corpus.held_out)?];
        for e in &extra {
            evals.push(TaskSampler::new(e.clone(), &model, &corpus.held_out)?);
        }
        let job = TrainJob {
            model: &model,
            config: &t,
            model_config,
            train: &train_s,
            evals: evals.iter().map(|s| s as &dyn BatchSampler).collect(),
            out_dir: Some(out.clone()),
            deterministic: cfg.deterministic,
            stage: None,
            step_offset: 0,
        };
        Ok(run_training(&job, params)?)
    } else {
        let stages = cfg
            .stages
            .iter()
            .map(|s| Ok(Stage { task: lookup_task(&s.task, &opts)?, config: with_frozen(&s.train) }))
            .collect::<Result<Vec<_>>>()?;
        let mut evals = vec![stages.last().expect("validated non-empty").task.clone()];
        evals.extend(extra);
        Ok(run_curriculum(&model, model_config, &stages, params, &corpus.train, &corpus.held_out, &evals, Some(out.clone()), cfg.deterministic)?)
    }
}

/// Held-out metrics plus the training budget behind them.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub loss: f64,
    pub h_r: f64,
    pub token_accuracy: f64,
    pub denominator: f64,
    pub n_evaluated: usize,
    pub budget: Budget,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
}

/// `probe`: trains a fresh decoder to invert frozen embeddings and writes
/// `report.json`.
pub fn probe(cfg: &ProbeFileConfig) -> Result<ProbeReport> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_toml(&out.join(RESOLVED_CONFIG), cfg)?;
    let budget = Budget { steps: cfg.probe.train.total_steps, batch_size: cfg.probe.train.batch_size };
    let (outcome, source) = match &cfg.source {
        ProbeSourceConfig::Embeddings(path) => {
            let file = read_embeddings(path)?;
            let window = file.records.first().map(|r| r.ids.len()).context("embedding file has no records")?;
            ensure!(file.records.iter().all(|r| r.ids.len() == window), "{}: records embed sequences of different lengths", path.display());
            let records: Vec<(Vec<TokenId>, Vec<f32>)> = file.records.into_iter().map(|r| (r.ids, r.vector)).collect();
            let o = retention_probe(ProbeSource::Embeddings { records: &records, window }, &cfg.probe, Some(out.clone()), cfg.deterministic)?;
            (o, file.source)
        }
        src => {
            let corpus = data::load(&cfg.corpus, &cfg.tokenizer, out)?;
            check_vocab(&corpus.tokenizer, cfg.probe.decoder.vocab_size)?;
            let (weights, name) = match src {
                ProbeSourceConfig::Checkpoint(dir) => {
                    let (arch, p) = load_model(dir)?;
                    (encoder_from_checkpoint(&arch, &p)?, dir.display().to_string())
                }
                ProbeSourceConfig::Untrained { model, seed } => (untrained_encoder(model, *seed)?, "untrained".to_string()),
                ProbeSourceConfig::Embeddings(_) => unreachable!(),
            };
            let source = ProbeSource::Encoder { weights, train: &corpus.train, held_out: &corpus.held_out };
            (retention_probe(source, &cfg.probe, Some(out.clone()), cfg.deterministic)?, Some(name))
        }
    };
    let b = outcome.best;
    let report = ProbeReport {
        loss: b.loss,
        h_r: b.h_r,
        token_accuracy: b.token_accuracy,
        denominator: b.denominator,
        n_evaluated: b.n_evaluated,
        budget,
        source,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// A freshly initialized encoder.
pub fn untrained_encoder(model: &memlab::architectures::ModelConfig, seed: u64) -> Result<EncoderWeights> {
    let arch = Architecture::Decoder { model: model.clone() };
    let params = arch.build()?.init_params(seed);
    Ok(encoder_from_checkpoint(&arch, &params)?)
}

/// Options of `eval`.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub task: String,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score uniform-random token sequences instead of held-out text.
    pub uniform: bool,
}

/// `eval`: held-out metrics of a checkpoint on one task.
pub fn eval(checkpoint: &Path, corpus: &CorpusConfig, tokenizer: &TokenizerConfig, opts: &EvalOptions) -> Result<MetricReport> {
    ensure!(opts.batches > 0 && opts.batch_size > 0, "batches and batch size must be positive");
    let (arch, params) = load_model(checkpoint)?;
    let model = arch.build()?;
    let task = lookup_task(&opts.task, &TaskOptions::default())?;
    let scratch = std::env::temp_dir();
    let data = data::load(corpus, tokenizer, &scratch)?;
    check_vocab(&data.tokenizer, arch.vocab_size())?;
    let uniform = UniformTokens { support: data.tokenizer.text_vocab_size() };
    let source: &dyn TokenSource = if opts.uniform { &uniform } else { &data.held_out };
    evaluate_checkpoint(&model, &params, task, source, opts)
}

pub fn evaluate_checkpoint(
    model: &Built,
    params: &ParamStore,
    task: Arc<dyn Task>,
    source: &dyn TokenSource,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let sampler = TaskSampler::new(task, model, source)?;
    let groups = (0..opts.batches)
        .map(|i| sampler.sample(opts.batch_size, step_seed(opts.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_model(model, params, &groups)?)
}

/// `export-embeddings`: embeds consecutive encoder-width windows of the
/// corpus and writes them to an embedding file. Returns the record count.
pub fn export_embeddings(
    checkpoint: &Path,
    corpus: &CorpusConfig,
    tokenizer: &TokenizerConfig,
    out: &Path,
    held_out: bool,
    limit: Option<usize>,
) -> Result<usize> {
    let (arch, params) = load_model(checkpoint)?;
    let enc = encoder_from_checkpoint(&arch, &params)?;
    let data = data::load(corpus, tokenizer, &std::env::temp_dir())?;
    check_vocab(&data.tokenizer, enc.config.vocab_size)?;
    let stream = if held_out { &data.held_out } else { &data.train };
    let net = Network::new(enc.config.clone(), "encoder", false)?;
    let n = net.n_ctx();
    let mut windows: Vec<&[TokenId]> = stream.tokens().chunks_exact(n).collect();
    if let Some(l) = limit {
        windows.truncate(l);
    }
    let mut records = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(32) {
        let ids: Vec<usize> = chunk.iter().flat_map(|w| w.iter().map(|&t| t as usize)).collect();
        let mut g = Expr::new();
        let e = net.encode(&mut g, &ids, chunk.len())?;
        let ev = g.forward(&enc.params)?;
        let v = ev.value(e);
        let d = net.d_model();
        for (i, w) in chunk.iter().enumerate() {
            records.push(EmbeddingRecord { ids: w.to_vec(), vector: v.data()[i * d..(i + 1) * d].to_vec() });
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_embeddings(out, net.d_model(), &records)?;
    Ok(records.len())
}

/// `plan`: the cost table as TSV. Without explicit chunk counts, powers of
/// two up to `n` plus the optimum.
pub fn plan(n: usize, chunks: &[usize], d_model: usize) -> Result<(String, memlab::planner::ChunkPlan)> {
    let best = optimal_chunks(n)?;
    let mut s: Vec<usize> = if chunks.is_empty() {
        let mut v: Vec<usize> = (0..).map(|k| 1usize << k).take_while(|&p| p <= n).collect();
        v.push(best.s);
        v
    } else {
        chunks.to_vec()
    };
    if chunks.is_empty() {
        s.sort_unstable();
        s.dedup();
    }
    Ok((to_tsv(&cost_table(n, d_model, &s)?), best))
}

/// `tokenizer-train`: trains on the training split and saves the tokenizer.
pub fn tokenizer_train(corpus: &CorpusConfig, vocab_size: usize, out: &Path) -> Result<Tokenizer> {
    let docs = data::documents(corpus)?;
    let (train, _) = memlab::corpus::split_held_out(&docs, memlab::corpus::HELD_OUT_FRACTION)?;
    let tok = Tokenizer::train(&train, vocab_size)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    tok.save(out)?;
    Ok(tok)
}

/// A corpus given on the command line: a path, or the default synthetic text.
pub fn corpus_arg(path: Option<PathBuf>) -> Result<CorpusConfig> {
    if let Some(p) = &path {
        if !p.exists() {
            bail!("corpus path {} does not exist", p.display());
        }
    }
    Ok(CorpusConfig { synthetic: path.is_none().then(Default::default), path })
}
