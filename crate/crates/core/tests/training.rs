use std::sync::Arc;

use indexmap::IndexMap;
use memlab::architectures::*;
use memlab::corpus::{SpecialTokens, TokenId, TokenStream};
use memlab::numerics::Tensor;
use memlab::objectives::{lookup_task, Task, TaskOptions};
use memlab::training::*;

const V: usize = 24;

fn cfg(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(steps, 4);
    c.peak_lr = 3e-3;
    c.warmup_steps = 5.min(steps);
    c.eval_every = 10;
    c.eval_batches = 2;
    c
}

/// Documents cycling through a short token pattern.
fn patterned() -> TokenStream {
    let docs: Vec<Vec<TokenId>> = (0..40).map(|d| (0..60).map(|i| ((i * 3 + d) % 7) as TokenId).collect()).collect();
    TokenStream::from_encoded(docs, SpecialTokens::for_vocab(V).pad).unwrap()
}

fn decoder() -> (Architecture, Built) {
    let arch = Architecture::Decoder { model: ModelConfig::mixer(16, 1, 8, V) };
    let built = arch.build().unwrap();
    (arch, built)
}

fn task(name: &str) -> Arc<dyn Task> {
    lookup_task(name, &TaskOptions::default()).unwrap()
}

fn run(
    arch: &Architecture,
    model: &Built,
    config: &TrainConfig,
    tokens: &TokenStream,
    out: Option<std::path::PathBuf>,
    params: ParamStore,
) -> Result<TrainOutcome, TrainError> {
    let sampler = TaskSampler::new(task("causal"), model, tokens)?;
    let job = TrainJob {
        model,
        config,
        model_config: serde_json::to_value(arch).unwrap(),
        train: &sampler,
        evals: vec![&sampler],
        out_dir: out,
        deterministic: true,
        stage: None,
        step_offset: 0,
    };
    run_training(&job, params)
}

#[test]
fn schedule_examples() {
    let mut c = TrainConfig::new(1000, 1);
    c.peak_lr = 2e-4;
    c.warmup_steps = 500;
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert!((lr_schedule(250, &c) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(500, &c), 2e-4);
    assert!((lr_schedule(750, &c) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(1000, &c), 0.0);
    c.warmup_steps = 1001;
    assert!(matches!(c.validate(), Err(TrainError::Config(_))));
}

#[test]
fn first_adamw_step_moves_by_lr() {
    let mut c = TrainConfig::new(10, 1);
    c.weight_decay = 0.0;
    let mut params = ParamStore::default();
    params.insert("w", Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap());
    let mut grads = IndexMap::new();
    grads.insert("w".to_string(), Tensor::new(vec![2], vec![1.0f32, -3.0]).unwrap());
    let mut state = AdamState::default();
    adamw_step(&mut params, &grads, &mut state, 0.1, &c).unwrap();
    // Bias-corrected moments are g and g², so each coordinate moves by lr·sign(g)/(1+ε/|g|).
    let w = params.get("w").unwrap().data();
    assert_eq!(w[0], (0.5 - 0.1 / (1.0 + 1e-8)) as f32);
    assert_eq!(w[1], (-0.25 + 0.1 * 3.0 / (3.0 + 1e-8)) as f32);

    // Decoupled decay alone: x ← x(1 − lr·λ).
    c.weight_decay = 0.5;
    let mut p2 = ParamStore::default();
    p2.insert("w", Tensor::new(vec![1], vec![2.0f32]).unwrap());
    let mut g2 = IndexMap::new();
    g2.insert("w".to_string(), Tensor::new(vec![1], vec![0.0f32]).unwrap());
    adamw_step(&mut p2, &g2, &mut AdamState::default(), 0.1, &c).unwrap();
    assert_eq!(p2.get("w").unwrap().data()[0], 1.9);

    let mut bad = IndexMap::new();
    bad.insert("w".to_string(), Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap());
    let before = params.clone();
    assert!(matches!(adamw_step(&mut params, &bad, &mut state, 0.1, &c), Err(TrainError::NonFiniteGradient(_))));
    assert!(params.bitwise_eq(&before));
}

#[test]
fn clipping_bounds_global_norm() {
    let mut grads = IndexMap::new();
    grads.insert("a".to_string(), Tensor::new(vec![2], vec![3.0f32, 0.0]).unwrap());
    grads.insert("b".to_string(), Tensor::new(vec![1], vec![4.0f32]).unwrap());
    assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
    let norm: f32 = grads.values().flat_map(|g| g.data().iter().map(|x| x * x)).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn causal_training_learns_a_pattern() {
    let (arch, model) = decoder();
    let out = run(&arch, &model, &cfg(60), &patterned(), None, model.init_params(0)).unwrap();
    let first = out.records.first().unwrap();
    let last = out.last().unwrap();
    assert_eq!(first.step, 0);
    assert_eq!(last.step, 60);
    assert_eq!(out.records.len(), 7);
    assert!(last.loss < 0.6 * first.loss, "{} -> {}", first.loss, last.loss);
    assert!(first.train_loss.is_none() && last.train_loss.is_some());
    assert!(last.seconds.is_none());
}

#[test]
fn freezing_is_bitwise() {
    let (arch, model) = decoder();
    let mut c = cfg(20);
    c.freeze = vec!["decoder.blocks.".into(), "decoder.wte".into()];
    c.unfreeze = vec!["decoder.blocks.0.ln".into()];
    let init = model.init_params(1);
    let out = run(&arch, &model, &c, &patterned(), None, init.clone()).unwrap();
    for (name, t) in init.iter() {
        let same = out.params.get(name).unwrap().data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert_eq!(same, !c.trainable(name), "{name}");
    }
}

#[test]
fn runs_are_byte_identical() {
    let (arch, model) = decoder();
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(20);
    c.checkpoint_every = Some(10);
    for k in 0..2 {
        run(&arch, &model, &c, &patterned(), Some(dir.path().join(k.to_string())), model.init_params(2)).unwrap();
    }
    let a = std::fs::read(dir.path().join("0").join(METRICS_FILE)).unwrap();
    let b = std::fs::read(dir.path().join("1").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let line: serde_json::Value = serde_json::from_slice(a.split(|&c| c == b'\n').next().unwrap()).unwrap();
    assert_eq!(line["schema"], RECORD_SCHEMA);
    assert_eq!(line["seconds"], serde_json::Value::Null);

    let (manifest, params) = load_checkpoint(&dir.path().join("0").join("checkpoint")).unwrap();
    assert_eq!(serde_json::from_value::<Architecture>(manifest.config).unwrap(), arch);
    assert_eq!(params.len(), model.init_params(0).len());
    assert!(dir.path().join("0").join("checkpoints").join("step-10").is_dir());
}

#[test]
fn divergence_reports_the_step() {
    let (arch, model) = decoder();
    let mut params = model.init_params(0);
    // A head certain of token 20, which never occurs.
    params.get_mut("decoder.lm_head.b").unwrap().data_mut()[20] = 1e3;
    let err = run(&arch, &model, &cfg(5), &patterned(), None, params).unwrap_err();
    match err {
        TrainError::Diverged { step, loss, checkpoint } => {
            assert_eq!(step, 1);
            assert!(loss > 3.0 * (V as f64).ln());
            assert!(checkpoint.is_none());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn single_stage_curriculum_matches_plain_training() {
    let (arch, model) = decoder();
    let tokens = patterned();
    let c = cfg(20);
    let plain = run(&arch, &model, &c, &tokens, None, model.init_params(3)).unwrap();
    let stages = [Stage { task: task("causal"), config: c.clone() }];
    let cur = run_curriculum(
        &model,
        serde_json::to_value(&arch).unwrap(),
        &stages,
        model.init_params(3),
        &tokens,
        &tokens,
        &[task("causal")],
        None,
        true,
    )
    .unwrap();
    assert!(cur.params.bitwise_eq(&plain.params));
    assert_eq!(cur.records.len(), plain.records.len());
    for (a, b) in cur.records.iter().zip(&plain.records) {
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.stage.as_deref(), Some("stage-0-causal"));
    }
}

#[test]
fn curriculum_stages_continue_from_each_other() {
    let layout = MemoryLayout {
        s: 2,
        chunk_len: 4,
        placement: Placement::Fixed,
        variant: MemoryVariant::Parallel,
        encoder: Some(ModelConfig::mixer(8, 1, 4, V)),
        decoder: ModelConfig::transformer(8, 1, 16, 2, V),
        encoder_frozen: true,
        ones_control: false,
    };
    let arch = Architecture::Memory(layout);
    let model = arch.build().unwrap();
    let tokens = patterned();
    let mut c = cfg(10);
    c.freeze = vec!["encoder.".into()];
    let stages = [
        Stage { task: task("blank_copy"), config: c.clone() },
        Stage { task: task("copy"), config: c.clone() },
    ];
    let dir = tempfile::tempdir().unwrap();
    let init = model.init_params(4);
    let out = run_curriculum(
        &model,
        serde_json::to_value(&arch).unwrap(),
        &stages,
        init.clone(),
        &tokens,
        &tokens,
        &[task("copy")],
        Some(dir.path().to_path_buf()),
        true,
    )
    .unwrap();
    let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 10, 20]);
    // The second stage starts where the first ended.
    assert_eq!(out.records[1].loss, out.records[2].loss);
    let (_, stage0) = load_checkpoint(&dir.path().join("stage-0-blank_copy").join("checkpoint")).unwrap();
    assert!(!stage0.bitwise_eq(&out.params));
    for (name, t) in init.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        assert!(out.params.get(name).unwrap().data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 4);

    // A stage the model cannot run is rejected before anything trains.
    let bad = [Stage { task: task("causal"), config: c.clone() }, Stage { task: task("autoencode"), config: c }];
    let err = run_curriculum(&model, serde_json::Value::Null, &bad, init, &tokens, &tokens, &[task("copy")], None, true);
    assert!(err.is_err());
}

#[test]
fn probe_of_a_decoder_checkpoint() {
    let (arch, model) = decoder();
    let params = model.init_params(5);
    let enc = encoder_from_checkpoint(&arch, &params).unwrap();
    assert!(enc.params.names().all(|n| n.starts_with("encoder.")));
    assert!(!enc.params.names().any(|n| n.contains("lm_head")));
    assert_eq!(enc.params.get("encoder.wte").unwrap(), params.get("decoder.wte").unwrap());

    let tokens = patterned();
    let probe = ProbeConfig {
        decoder: ModelConfig::mixer(16, 1, 8, V),
        train: cfg(20),
        train_wte: true,
        unroll_window: None,
        embedding_dim: None,
    };
    let out = retention_probe(ProbeSource::Encoder { weights: enc, train: &tokens, held_out: &tokens }, &probe, None, true).unwrap();
    let best = out.records.iter().map(|r| r.h_r).fold(f64::MIN, f64::max);
    assert_eq!(out.best.h_r, best);
    assert!(out.best.h_r > out.records[0].h_r);
}

#[test]
fn probe_rejects_embedding_width_mismatch() {
    let records: Vec<(Vec<TokenId>, Vec<f32>)> = (0..40).map(|i| (vec![i % 7; 4], vec![i as f32; 6])).collect();
    let probe = ProbeConfig {
        decoder: ModelConfig::mixer(8, 1, 4, V),
        train: cfg(5),
        train_wte: false,
        unroll_window: None,
        embedding_dim: Some(8),
    };
    let err = retention_probe(ProbeSource::Embeddings { records: &records, window: 4 }, &probe, None, true).unwrap_err();
    assert!(matches!(err, TrainError::EmbeddingDim { expected: 8, found: 6 }));
    let ok = ProbeConfig { embedding_dim: Some(6), ..probe };
    let out = retention_probe(ProbeSource::Embeddings { records: &records, window: 4 }, &ok, None, true).unwrap();
    assert_eq!(out.records.last().unwrap().step, 5);
}
