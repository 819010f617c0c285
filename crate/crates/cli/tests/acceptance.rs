//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Criteria 3, 4, 5, 9, 10 and 13 train desk-scale models for hours on one
//! core and only run with `MEMLAB_ACCEPTANCE=full`. Their artifacts go to
//! `$MEMLAB_ACCEPTANCE_DIR` (a temporary directory when unset) and their
//! corpus is `$MEMLAB_CORPUS` or the default synthetic text.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use memlab::architectures::*;
use memlab::corpus::{synthetic::SyntheticSpec, Tokenizer};
use memlab::metrics::{entropy_ratio, MetricReport};
use memlab::numerics::{finite_difference_check, Expr, FdConfig, NodeId, Tensor};
use memlab::objectives::lookup_task;
use memlab::planner::optimal_chunks;
use memlab::training::{run_training, ProbeConfig, TaskSampler, TrainConfig, TrainJob, UniformTokens};
use memlab_cli::commands::{self, EvalOptions};
use memlab_cli::config::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Desk-scale recipe shared by the heavy criteria.
const VOCAB: usize = 512;
const D: usize = 256;
const LAYERS: usize = 4;
const N_CTX: usize = 64;
const FF_MULT: usize = 1;
const BATCH: usize = 8;
const LR: f64 = 5e-3;
const AE_STEPS: usize = 20_000;
const CAUSAL_ENCODER_STEPS: usize = 4_000;
const PROBE_STEPS: usize = 3_000;
const UNIFORM_STEPS: usize = 2_000;
const MEMORY_STEPS: usize = 5_000;
const MEMORY_D: usize = 128;
const MEMORY_LAYERS: usize = 2;
const CHUNKS: usize = 4;
const CHUNK_LEN: usize = 64;
const CONTROL_STEPS: usize = 5_000;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn judge(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Suite {
    full: bool,
    dir: PathBuf,
    corpus: CorpusConfig,
    tokenizer: Option<PathBuf>,
    /// Criterion-3 autoencoder checkpoint and its held-out autoencode loss.
    autoencoder: Option<(PathBuf, f64)>,
    /// Metrics of the frozen-encoder run, for the determinism rerun.
    frozen_run: Option<PathBuf>,
}

fn minutes(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() / 60.0
}

fn mixer(n_ctx: usize) -> ModelConfig {
    let mut m = ModelConfig::mixer(D, LAYERS, n_ctx, VOCAB);
    m.ff_mult = FF_MULT;
    m
}

fn autoencoder_arch() -> Architecture {
    Architecture::Autoencoder(AutoencoderConfig { encoder: mixer(N_CTX), decoder: mixer(N_CTX), unroll_window: None })
}

fn train_config(steps: usize) -> TrainConfig {
    let mut t = TrainConfig::new(steps, BATCH);
    t.peak_lr = LR;
    t.warmup_steps = 200.min(steps);
    t.eval_every = (steps / 10).max(1);
    t.eval_batches = 16;
    t
}

fn final_eval(outcome: &memlab::training::TrainOutcome, task: &str) -> Result<MetricReport> {
    let last = outcome.last().context("run wrote no records")?;
    last.evals.get(task).cloned().with_context(|| format!("no `{task}` evaluation"))
}

impl Suite {
    fn tokenizer(&mut self) -> Result<PathBuf> {
        if let Some(p) = &self.tokenizer {
            return Ok(p.clone());
        }
        let path = self.dir.join("tokenizer.json");
        if !path.exists() {
            commands::tokenizer_train(&self.corpus, VOCAB, &path)?;
        }
        self.tokenizer = Some(path.clone());
        Ok(path)
    }

    fn experiment(&mut self, name: &str, model: Architecture, task: &str, train: TrainConfig, evals: &[&str]) -> Result<ExperimentConfig> {
        let tok = self.tokenizer()?;
        Ok(ExperimentConfig {
            output_dir: self.dir.join(name),
            deterministic: true,
            corpus: self.corpus.clone(),
            tokenizer: TokenizerConfig { path: Some(tok), vocab_size: None },
            model,
            task: TaskConfig { name: task.into(), ..TaskConfig::default() },
            train: Some(train),
            stages: Vec::new(),
            evals: evals.iter().map(|e| e.to_string()).collect(),
            init: InitConfig::default(),
        })
    }

    fn run(&self, mut cfg: ExperimentConfig) -> Result<memlab::training::TrainOutcome> {
        cfg.resolve(&self.dir)?;
        commands::train(&cfg)
    }

    fn autoencoder(&self) -> Result<(PathBuf, f64)> {
        self.autoencoder.clone().context("needs the criterion-3 autoencoder, which did not train")
    }

    fn memory_layout(&self, ones_control: bool) -> MemoryLayout {
        let mut decoder = ModelConfig::mixer(MEMORY_D, MEMORY_LAYERS, CHUNKS + 3 + CHUNKS * CHUNK_LEN, VOCAB);
        decoder.ff_mult = FF_MULT;
        MemoryLayout {
            s: CHUNKS,
            chunk_len: CHUNK_LEN,
            placement: Placement::Fixed,
            variant: MemoryVariant::Parallel,
            encoder: Some(mixer(CHUNK_LEN)),
            decoder,
            encoder_frozen: true,
            ones_control,
        }
    }

    /// A memory model with the criterion-3 encoder, frozen.
    fn memory_experiment(&mut self, name: &str, task: &str, train: TrainConfig) -> Result<ExperimentConfig> {
        let (ae, _) = self.autoencoder()?;
        let mut cfg = self.experiment(name, Architecture::Memory(self.memory_layout(false)), task, train, &["copy"])?;
        cfg.init.encoder_checkpoint = Some(ae.join("checkpoint"));
        Ok(cfg)
    }
}

// --- 1: gradients ---------------------------------------------------------

fn weighted_sum(g: &mut Expr, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let n: usize = g.shape(x).iter().product();
    let flat = g.reshape(x, &[1, n]).unwrap();
    let w = g.constant(&Tensor::from_fn(&[n, 1], |_| rng.gen_range(0.5..1.5)));
    let s = g.matmul(flat, w).unwrap();
    g.reshape(s, &[]).unwrap()
}

type Build = Box<dyn Fn(&mut Expr) -> NodeId>;

fn primitive_cases() -> Vec<(&'static str, Build, Vec<(&'static str, Vec<usize>)>)> {
    let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
    let mut cases: Vec<(&'static str, Build, Vec<(&'static str, Vec<usize>)>)> = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
        let sb = if tb { vec![5, 4] } else { vec![4, 5] };
        let (ca, cb) = (sa.clone(), sb.clone());
        cases.push((
            "matmul",
            Box::new(move |g: &mut Expr| {
                let a = g.input("a", &ca).unwrap();
                let b = g.input("b", &cb).unwrap();
                g.matmul_t(a, b, ta, tb).unwrap()
            }),
            vec![("a", sa), ("b", sb)],
        ));
    }
    cases.push((
        "add/mul",
        Box::new(|g: &mut Expr| {
            let a = g.input("a", &[2, 3, 4]).unwrap();
            let b = g.input("b", &[3, 1]).unwrap();
            let s = g.add(a, b).unwrap();
            let m = g.mul(s, b).unwrap();
            g.scale(m, -1.5).unwrap()
        }),
        vec![("a", vec![2, 3, 4]), ("b", vec![3, 1])],
    ));
    cases.push((
        "affine",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[2, 3, 4]).unwrap();
            let w = g.input("w", &[4, 5]).unwrap();
            let b = g.input("b", &[5]).unwrap();
            g.affine(x, w, b).unwrap()
        }),
        vec![("x", vec![2, 3, 4]), ("w", vec![4, 5]), ("b", vec![5])],
    ));
    cases.push((
        "gather",
        Box::new(|g: &mut Expr| {
            let t = g.input("t", &[4, 3]).unwrap();
            g.gather(t, vec![0, 2, 2, 3, 0, 1], &[2, 3]).unwrap()
        }),
        vec![("t", vec![4, 3])],
    ));
    cases.push((
        "softmax",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[2, 5]).unwrap();
            g.softmax(x).unwrap()
        }),
        vec![("x", vec![2, 5])],
    ));
    cases.push((
        "masked_softmax",
        Box::new(move |g: &mut Expr| {
            let x = g.input("x", &[2, 4, 4]).unwrap();
            g.masked_softmax(x, mask.clone(), &[4, 4]).unwrap()
        }),
        vec![("x", vec![2, 4, 4])],
    ));
    cases.push((
        "layer_norm",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[4, 6]).unwrap();
            let gamma = g.input("gamma", &[6]).unwrap();
            let beta = g.input("beta", &[6]).unwrap();
            g.layer_norm(x, gamma, beta, 1e-5).unwrap()
        }),
        vec![("x", vec![4, 6]), ("gamma", vec![6]), ("beta", vec![6])],
    ));
    cases.push((
        "gelu/transpose/reshape",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[2, 3, 4, 2]).unwrap();
            let t = g.transpose(x, 1, 2).unwrap();
            let r = g.reshape(t, &[8, 3, 2]).unwrap();
            g.gelu(r).unwrap()
        }),
        vec![("x", vec![2, 3, 4, 2])],
    ));
    cases.push((
        "slice/concat",
        Box::new(|g: &mut Expr| {
            let a = g.input("a", &[2, 3, 4]).unwrap();
            let b = g.input("b", &[2, 2, 4]).unwrap();
            let s = g.slice(a, 1, 1, 2).unwrap();
            let c = g.concat(&[s, b, a], 1).unwrap();
            g.mul(c, c).unwrap()
        }),
        vec![("a", vec![2, 3, 4]), ("b", vec![2, 2, 4])],
    ));
    cases.push((
        "cross_entropy",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[3, 2, 6]).unwrap();
            g.cross_entropy(x, vec![0, 5, 2, 2, 1, 3], vec![true, false, true, true, false, true]).unwrap()
        }),
        vec![("x", vec![3, 2, 6])],
    ));
    cases.push((
        "l2_normalize",
        Box::new(|g: &mut Expr| {
            let x = g.input("x", &[3, 4]).unwrap();
            g.l2_normalize(x, 1e-12).unwrap()
        }),
        vec![("x", vec![3, 4])],
    ));
    cases.push((
        "stop_gradient",
        // Central differences see through the stop, so only `y` varies.
        Box::new(|g: &mut Expr| {
            let x = g.constant(&Tensor::new(vec![3], vec![0.3, -1.1, 0.7]).unwrap());
            let y = g.input("y", &[3]).unwrap();
            let s = g.stop_gradient(x);
            let p = g.mul(s, y).unwrap();
            g.mul(p, y).unwrap()
        }),
        vec![("y", vec![3])],
    ));
    cases
}

fn fd_primitive(build: &Build, inputs: &[(&str, Vec<usize>)]) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let mut g = Expr::new();
        let out = build(&mut g);
        let root = if g.shape(out).is_empty() { out } else { weighted_sum(&mut g, out, &mut rng) };
        let binds: HashMap<String, Tensor<f64>> =
            inputs.iter().map(|(n, s)| (n.to_string(), Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)))).collect();
        let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
        let err = finite_difference_check(&g, root, &binds, &names, FdConfig { seed: point, ..FdConfig::default() }).unwrap();
        worst = worst.max(err);
    }
    worst
}

const V: usize = 16;

fn small_layout(variant: MemoryVariant) -> MemoryLayout {
    MemoryLayout {
        s: 3,
        chunk_len: 4,
        placement: Placement::Fixed,
        variant,
        encoder: (variant != MemoryVariant::Recurrent)
            .then(|| ModelConfig::mixer(8, 1, if variant == MemoryVariant::Oracle { 12 } else { 4 }, V)),
        decoder: ModelConfig::transformer(8, 1, 12, 2, V),
        encoder_frozen: false,
        ones_control: false,
    }
}

fn tail(ids: &[u32]) -> Vec<Slot> {
    ids.iter().map(|&t| Slot::Token(t)).collect()
}

/// Loss gradient w.r.t. every parameter at ten perturbed parameter draws.
fn fd_block(built: &Built, build: impl Fn(&mut Expr) -> NodeId, targets: usize) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..10u64 {
        let mut params = built.init_params(100 + point).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let mut g = Expr::new();
        let logits = build(&mut g);
        let tgt: Vec<usize> = (0..targets).map(|_| rng.gen_range(0..V)).collect();
        let loss = g.cross_entropy(logits, tgt, vec![true; targets]).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        // The mixer's per-position bias has an exactly-zero gradient under
        // pre-norm, hence the absolute floor.
        let cfg = FdConfig { max_coords: 12, seed: point, floor: 1e-6, ..FdConfig::default() };
        worst = worst.max(finite_difference_check(&g, loss, &params, &names, cfg).unwrap());
    }
    worst
}

fn gradients(_: &mut Suite) -> Result<Verdict> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, build, inputs) in primitive_cases() {
        worst.push((name.to_string(), fd_primitive(&build, &inputs)));
    }
    for cfg in [ModelConfig::mixer(8, 2, 5, V), ModelConfig::transformer(8, 2, 5, 2, V)] {
        let net = Network::new(cfg, "decoder", true)?;
        let built = Built::Decoder(net.clone());
        let ids: Vec<usize> = vec![1, 2, 3, 4, 0, 5, 6, 7, 8, 9];
        worst.push((net.cfg.family.clone(), fd_block(&built, |g| net.forward_tokens(g, &ids, 2).unwrap(), 10)));
    }
    let ae_cfg = AutoencoderConfig {
        encoder: ModelConfig::mixer(8, 1, 4, V),
        decoder: ModelConfig::transformer(8, 1, 4, 2, V),
        unroll_window: None,
    };
    let ae = Autoencoder::new(&ae_cfg)?;
    let built = Built::Autoencoder(ae.clone());
    let ids = vec![1, 2, 3, 4, 5, 6, 7, 8];
    worst.push(("unroll".into(), fd_block(&built, |g| ae.forward(g, &ids, 2).unwrap(), 8)));
    for variant in [MemoryVariant::Parallel, MemoryVariant::Oracle] {
        let model = MemoryModel::new(small_layout(variant))?;
        let built = Built::Memory(model.clone());
        let prefix: Vec<u32> = (0..24).map(|i| (i % 11) as u32).collect();
        let rows = 2 * (model.layout.memories_per_row() + 4);
        let err = fd_block(
            &built,
            |g| {
                let mem = model.memories(g, &prefix, 2).unwrap();
                let r = model.rows(&mem, &[tail(&[1, 2, 3, 4]), tail(&[5, 6, 7, 8])]);
                model.decoder_logits(g, Some(&mem), &r).unwrap()
            },
            rows,
        );
        worst.push((format!("memory {variant:?}"), err));
    }
    let model = MemoryModel::new(small_layout(MemoryVariant::Recurrent))?;
    let built = Built::Memory(model.clone());
    let segs: Vec<u32> = (0..24).map(|i| (i % 11) as u32).collect();
    let err = fd_block(
        &built,
        |g| {
            let outs = model.recurrent_logits(g, &segs, 2).unwrap();
            g.concat(&outs, 1).unwrap()
        },
        24,
    );
    worst.push(("memory Recurrent".into(), err));
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(judge(max < 1e-4, format!("{} checks, max relative error {max:.2e} ({name})", worst.len())))
}

// --- 2: metric arithmetic ---------------------------------------------------

fn metric_arithmetic(_: &mut Suite) -> Result<Verdict> {
    let vocab = 8365;
    let denom = (vocab as f64).ln();
    let mut worst = 0.0f64;
    for (loss, expected) in [(0.435, 0.952), (5.937, 0.343), (5.815, 0.356)] {
        worst = worst.max((entropy_ratio(loss, vocab)? - expected).abs());
    }
    Ok(judge(worst <= 0.002 && (denom - 9.03).abs() < 0.005, format!("denominator {denom:.4}, worst deviation {worst:.4}")))
}

// --- 3: autoencoder retention ------------------------------------------------

fn autoencoder_retention(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let cfg = s.experiment("autoencoder", autoencoder_arch(), "autoencode", train_config(AE_STEPS), &[])?;
    let out = s.run(cfg)?;
    let r = final_eval(&out, "autoencode")?;
    s.autoencoder = Some((s.dir.join("autoencoder"), r.loss));
    let min = minutes(start);
    Ok(judge(
        r.token_accuracy >= 0.90,
        format!("held-out accuracy {:.4} (needs 0.90) after {AE_STEPS} steps of batch {BATCH}, {min:.1} min", r.token_accuracy),
    ))
}

// --- 4: causal embeddings are information-poor --------------------------------

fn probe_config(s: &mut Suite, name: &str, source: ProbeSourceConfig) -> Result<ProbeFileConfig> {
    let tok = s.tokenizer()?;
    let mut cfg = ProbeFileConfig {
        output_dir: s.dir.join(name),
        deterministic: true,
        source,
        corpus: s.corpus.clone(),
        tokenizer: TokenizerConfig { path: Some(tok), vocab_size: None },
        probe: ProbeConfig {
            decoder: mixer(N_CTX),
            train: train_config(PROBE_STEPS),
            train_wte: true,
            unroll_window: None,
            embedding_dim: None,
        },
    };
    cfg.probe.train.seed = 11;
    Ok(cfg)
}

fn causal_embeddings(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let (ae, _) = s.autoencoder()?;
    let causal = s.experiment("causal-encoder", Architecture::Decoder { model: mixer(N_CTX) }, "causal", train_config(CAUSAL_ENCODER_STEPS), &[])?;
    s.run(causal)?;
    let mut acc = Vec::new();
    for (name, source) in [
        ("probe-autoencoder", ProbeSourceConfig::Checkpoint(ae.join("checkpoint"))),
        ("probe-causal", ProbeSourceConfig::Checkpoint(s.dir.join("causal-encoder/checkpoint"))),
        ("probe-untrained", ProbeSourceConfig::Untrained { model: mixer(N_CTX), seed: 3 }),
    ] {
        let cfg = probe_config(s, name, source)?;
        acc.push(commands::probe(&cfg)?.token_accuracy);
    }
    let (a, c, u) = (acc[0], acc[1], acc[2]);
    let ok = c < 0.25 * a && c <= 2.0 * u && u <= 2.0 * c;
    Ok(judge(
        ok,
        format!("probe accuracy autoencoder {a:.4}, causal {c:.4}, untrained {u:.4} ({PROBE_STEPS} steps each), {:.1} min", minutes(start)),
    ))
}

// --- 5: distribution dependence ------------------------------------------------

fn distribution_dependence(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let (ae, _) = s.autoencoder()?;
    let tok_path = s.tokenizer()?;
    let tok = TokenizerConfig { path: Some(tok_path.clone()), vocab_size: None };
    let opts = |uniform| EvalOptions { task: "autoencode".into(), batches: 16, batch_size: BATCH, seed: 5, uniform };
    let ckpt = ae.join("checkpoint");
    let text = commands::eval(&ckpt, &s.corpus, &tok, &opts(false))?;
    let noise = commands::eval(&ckpt, &s.corpus, &tok, &opts(true))?;
    let ratio = noise.loss / text.loss;

    // A second autoencoder trained on uniform tokens only.
    let tokenizer = Tokenizer::load(&tok_path)?;
    let uniform = UniformTokens { support: tokenizer.text_vocab_size() };
    let arch = autoencoder_arch();
    let model = arch.build()?;
    let task = lookup_task("autoencode", &Default::default())?;
    let train_s = TaskSampler::new(task.clone(), &model, &uniform)?;
    let eval_s = TaskSampler::new(task, &model, &uniform)?;
    let cfg = train_config(UNIFORM_STEPS);
    let job = TrainJob {
        model: &model,
        config: &cfg,
        model_config: serde_json::to_value(&arch)?,
        train: &train_s,
        evals: vec![&eval_s],
        out_dir: Some(s.dir.join("uniform-autoencoder")),
        deterministic: true,
        stage: None,
        step_offset: 0,
    };
    let out = run_training(&job, model.init_params(cfg.seed))?;
    let u = final_eval(&out, "autoencode")?.loss;
    let ln_t = (VOCAB as f64).ln();
    let gap = (u - ln_t).abs() / ln_t;
    Ok(judge(
        ratio >= 5.0 && gap <= 0.05,
        format!(
            "uniform/held-out loss {:.3}/{:.3} = {ratio:.1}x (needs 5x); uniform-trained loss {u:.3} vs ln|t| {ln_t:.3}, off by {:.1}%, {:.1} min",
            noise.loss,
            text.loss,
            gap * 100.0,
            minutes(start)
        ),
    ))
}

// --- 6, 7: structural invariances ---------------------------------------------

fn bits(t: &[f32]) -> Vec<u32> {
    t.iter().map(|v| v.to_bits()).collect()
}

fn chunk_independence(_: &mut Suite) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let text = (V - 5) as u32;
    for trial in 0..100u64 {
        let mut layout = small_layout(MemoryVariant::Parallel);
        layout.s = rng.gen_range(2..=5);
        if trial % 2 == 1 {
            layout.encoder = Some(ModelConfig::transformer(8, 1, 4, 2, V));
        }
        let s = layout.s;
        let model = MemoryModel::new(layout)?;
        let params = Built::Memory(model.clone()).init_params(trial);
        let a: Vec<u32> = (0..s * 4).map(|_| rng.gen_range(0..text)).collect();
        let mut b = a.clone();
        let victim = rng.gen_range(0..s);
        let pos = victim * 4 + rng.gen_range(0..4);
        b[pos] = (a[pos] + rng.gen_range(1..text)) % text;
        for i in victim * 4..victim * 4 + 4 {
            if rng.gen_bool(0.5) {
                b[i] = rng.gen_range(0..text);
            }
        }
        let mut g = Expr::new();
        let ma = model.memories(&mut g, &a, 1)?;
        let mb = model.memories(&mut g, &b, 1)?;
        let ev = g.forward(&params)?;
        for node in [ma.raw, ma.node] {
            let other = if node == ma.raw { mb.raw } else { mb.node };
            let (ra, rb) = (ev.value(node), ev.value(other));
            for j in (0..s).filter(|&j| j != victim) {
                ensure!(bits(ra.row(j)) == bits(rb.row(j)), "trial {trial}: chunk {j} moved when chunk {victim} changed");
            }
        }
    }
    Ok(Verdict::Pass("100 trials, other chunks bitwise unchanged".into()))
}

fn causality(_: &mut Suite) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 9;
    for cfg in [ModelConfig::mixer(8, 2, n, V), ModelConfig::transformer(8, 2, n, 2, V)] {
        let net = Network::new(cfg, "decoder", true)?;
        let built = Built::Decoder(net.clone());
        for trial in 0..100u64 {
            let params = built.init_params(trial);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..V - 5)).collect();
            let i = rng.gen_range(0..n - 1);
            let mut b = a.clone();
            b[rng.gen_range(i + 1..n)] = rng.gen_range(0..V - 5);
            for t in b.iter_mut().skip(i + 1) {
                if rng.gen_bool(0.3) {
                    *t = rng.gen_range(0..V - 5);
                }
            }
            let mut g = Expr::new();
            let la = net.forward_tokens(&mut g, &a, 1)?;
            let lb = net.forward_tokens(&mut g, &b, 1)?;
            let ev = g.forward(&params)?;
            let k = (i + 1) * V;
            ensure!(
                bits(&ev.value(la).data()[..k]) == bits(&ev.value(lb).data()[..k]),
                "{} trial {trial}: logits up to position {i} changed",
                net.cfg.family
            );
        }
    }
    Ok(Verdict::Pass("100 trials per family (mixer, transformer), earlier logits bitwise unchanged".into()))
}

// --- 8, 12: frozen encoder and determinism ---------------------------------------

const SMALL_VOCAB: usize = 300;

fn small_experiment(dir: &Path, name: &str, model: Architecture, steps: usize) -> ExperimentConfig {
    let mut train = TrainConfig::new(steps, 4);
    train.peak_lr = 3e-3;
    train.warmup_steps = 10.min(steps);
    train.eval_every = (steps / 4).max(1);
    train.eval_batches = 2;
    ExperimentConfig {
        output_dir: dir.join(name),
        deterministic: true,
        corpus: CorpusConfig { path: None, synthetic: Some(SyntheticSpec { bytes: 40_000, lexicon: 200, ..SyntheticSpec::default() }) },
        tokenizer: TokenizerConfig { path: None, vocab_size: Some(SMALL_VOCAB) },
        model,
        task: TaskConfig::default(),
        train: Some(train),
        stages: Vec::new(),
        evals: Vec::new(),
        init: InitConfig::default(),
    }
}

/// Trains a tiny autoencoder, then a memory model on top of its frozen
/// encoder for 1k steps. Returns the two output directories.
fn frozen_encoder_run(dir: &Path, tag: &str) -> Result<(PathBuf, PathBuf)> {
    let enc = ModelConfig::mixer(16, 1, 8, SMALL_VOCAB);
    let ae = Architecture::Autoencoder(AutoencoderConfig { encoder: enc.clone(), decoder: enc.clone(), unroll_window: None });
    let mut pre = small_experiment(dir, &format!("{tag}-ae"), ae, 20);
    pre.task.name = "autoencode".into();
    pre.resolve(dir)?;
    commands::train(&pre)?;
    let layout = MemoryLayout {
        s: 2,
        chunk_len: 8,
        placement: Placement::Fixed,
        variant: MemoryVariant::Parallel,
        encoder: Some(enc),
        decoder: ModelConfig::mixer(16, 1, 12, SMALL_VOCAB),
        encoder_frozen: true,
        ones_control: false,
    };
    let mut mem = small_experiment(dir, &format!("{tag}-memory"), Architecture::Memory(layout), 1000);
    mem.init.encoder_checkpoint = Some(pre.output_dir.join("checkpoint"));
    mem.resolve(dir)?;
    commands::train(&mem)?;
    Ok((pre.output_dir, mem.output_dir))
}

fn frozen_encoder(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let (ae_dir, mem_dir) = frozen_encoder_run(&s.dir, "frozen")?;
    let (_, before) = load_checkpoint(&ae_dir.join("checkpoint"))?;
    let (_, after) = load_checkpoint(&mem_dir.join("checkpoint"))?;
    let mut compared = 0;
    for (name, t) in after.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        let src = before.get(name).with_context(|| format!("autoencoder lacks `{name}`"))?;
        ensure!(bits(src.data()) == bits(t.data()), "`{name}` changed during training");
        compared += 1;
    }
    ensure!(compared > 0, "memory model has no encoder tensors");
    let decoder_moved = after.iter().any(|(n, t)| n.starts_with("decoder.") && before.get(n).map_or(true, |b| bits(b.data()) != bits(t.data())));
    s.frozen_run = Some(mem_dir.join(memlab::training::METRICS_FILE));
    Ok(judge(
        decoder_moved,
        format!("{compared} encoder tensors bitwise identical after 1000 steps, {:.1} min", minutes(start)),
    ))
}

fn determinism(s: &mut Suite) -> Result<Verdict> {
    let first = s.frozen_run.clone().context("needs the criterion-8 run")?;
    let (_, mem_dir) = frozen_encoder_run(&s.dir, "rerun")?;
    let a = std::fs::read(&first)?;
    let b = std::fs::read(mem_dir.join(memlab::training::METRICS_FILE))?;
    Ok(judge(a == b && !a.is_empty(), format!("criterion-8 run repeated: metrics JSONL {} vs {} bytes, identical: {}", a.len(), b.len(), a == b)))
}

// --- 9, 10: memory training objectives -----------------------------------------

fn combined_beats_causal(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let mut acc = Vec::new();
    for task in ["combined", "causal"] {
        let cfg = s.memory_experiment(&format!("memory-{task}"), task, train_config(MEMORY_STEPS))?;
        acc.push(final_eval(&s.run(cfg)?, "copy")?.token_accuracy);
    }
    let gain = (acc[0] - acc[1]) * 100.0;
    Ok(judge(
        gain >= 15.0,
        format!("copy accuracy combined {:.4} vs causal {:.4}, +{gain:.1} pp (needs 15), {:.1} min", acc[0], acc[1], minutes(start)),
    ))
}

fn curriculum_effect(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let half = MEMORY_STEPS / 2;
    let mut staged = s.memory_experiment("memory-curriculum", "copy", train_config(MEMORY_STEPS))?;
    staged.train = None;
    staged.stages = vec![
        StageConfig { task: "blank_copy".into(), train: train_config(half) },
        StageConfig { task: "copy".into(), train: train_config(MEMORY_STEPS - half) },
    ];
    let curriculum = final_eval(&s.run(staged)?, "copy")?.token_accuracy;
    let cfg = s.memory_experiment("memory-copy", "copy", train_config(MEMORY_STEPS))?;
    let single = final_eval(&s.run(cfg)?, "copy")?.token_accuracy;
    Ok(judge(
        curriculum > single,
        format!("copy accuracy blank_copy then copy {curriculum:.4} vs copy only {single:.4}, {MEMORY_STEPS} steps each, {:.1} min", minutes(start)),
    ))
}

// --- 11: planner --------------------------------------------------------------

/// Exhaustive argmin of max(n²/s, s²), ties to the larger s. Past the first
/// s with s³ ≥ n² the cost is s², so the scan stops there.
fn exhaustive(n: u64) -> u64 {
    let n2 = (n as u128) * (n as u128);
    let cost = |s: u64| -> (u128, u128) { (n2.max((s as u128).pow(3)), s as u128) };
    let mut best = 1u64;
    let mut s = 1u64;
    loop {
        let (a, sa) = cost(s);
        let (b, sb) = cost(best);
        if a * sb <= b * sa {
            best = s;
        }
        if (s as u128).pow(3) >= n2 || s == n {
            return best;
        }
        s += 1;
    }
}

fn planner(_: &mut Suite) -> Result<Verdict> {
    for n in 1..=(1u64 << 16) {
        let got = optimal_chunks(n as usize)?.s as u64;
        let want = exhaustive(n);
        ensure!(got == want, "n = {n}: planner {got}, exhaustive {want}");
    }
    let s4096 = optimal_chunks(4096)?.s;
    Ok(judge(s4096 == 256, format!("all n <= 65536 agree with exhaustive search; n = 4096 gives {s4096}")))
}

// --- 13: ones-control ------------------------------------------------------------

fn ones_control(s: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let layout = s.memory_layout(true);
    let mut baseline = layout.decoder.clone();
    baseline.n_ctx -= CHUNKS;
    let ones = s.experiment("ones-control", Architecture::Memory(layout), "causal", train_config(CONTROL_STEPS), &[])?;
    let l_ones = final_eval(&s.run(ones)?, "causal")?.loss;
    let base = s.experiment("no-memory", Architecture::Decoder { model: baseline }, "causal", train_config(CONTROL_STEPS), &[])?;
    let l_base = final_eval(&s.run(base)?, "causal")?.loss;
    let gap = (l_ones - l_base).abs() / l_base;
    Ok(judge(
        gap <= 0.03,
        format!("causal loss ones-control {l_ones:.4} vs no-memory {l_base:.4}, {:.2}% apart (needs 3%), {:.1} min", gap * 100.0, minutes(start)),
    ))
}

// --- driver ---------------------------------------------------------------------

type Criterion = fn(&mut Suite) -> Result<Verdict>;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let full = std::env::var("MEMLAB_ACCEPTANCE").is_ok_and(|v| v == "full");
    let _tmp;
    let dir = match std::env::var_os("MEMLAB_ACCEPTANCE_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            _tmp = tempfile::tempdir().expect("temporary directory");
            _tmp.path().to_path_buf()
        }
    };
    std::fs::create_dir_all(&dir).expect("acceptance directory");
    let corpus = match std::env::var_os("MEMLAB_CORPUS") {
        Some(p) => CorpusConfig { path: Some(PathBuf::from(p)), synthetic: None },
        None => CorpusConfig { path: None, synthetic: Some(SyntheticSpec::default()) },
    };
    let mut suite = Suite { full, dir, corpus, tokenizer: None, autoencoder: None, frozen_run: None };

    let criteria: [(u32, &str, bool, &str, Criterion); 13] = [
        (1, "gradient correctness", false, "2 min", gradients),
        (2, "metric arithmetic", false, "1 s", metric_arithmetic),
        (3, "autoencoder retention", true, "60 min", autoencoder_retention),
        (4, "causal embeddings are information-poor", true, "60 min", causal_embeddings),
        (5, "distribution dependence", true, "20 min", distribution_dependence),
        (6, "parallel-chunk independence", false, "1 min", chunk_independence),
        (7, "causality", false, "1 min", causality),
        (8, "frozen-encoder contract", false, "5 min", frozen_encoder),
        (9, "combined objective beats causal on copy", true, "90 min", combined_beats_causal),
        (10, "curriculum effect", true, "90 min", curriculum_effect),
        (11, "planner exactness", false, "1 min", planner),
        (12, "determinism", false, "rerun of criterion 8", determinism),
        (13, "ones-control", true, "60 min", ones_control),
    ];
    let mut failed = 0;
    for (id, title, heavy, budget, check) in criteria {
        let verdict = if heavy && !suite.full {
            Verdict::Skip(format!("budget {budget}; set MEMLAB_ACCEPTANCE=full to run"))
        } else {
            match catch_unwind(AssertUnwindSafe(|| check(&mut suite))) {
                Ok(Ok(v)) => v,
                Ok(Err(e)) => Verdict::Fail(format!("{e:#}")),
                Err(_) => Verdict::Fail("panicked".into()),
            }
        };
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} {title}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
