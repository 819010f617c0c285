use memlab::architectures::{Architecture, ModelConfig, ParamStore};
use memlab::corpus::{SpecialTokens, TokenId};
use memlab::metrics::*;
use memlab::numerics::Tensor;
use memlab::objectives::{lookup_task, TaskBatch, TaskOptions};
use proptest::prelude::*;

const V: usize = 32;

#[test]
fn entropy_ratio_reproduces_reported_pairs() {
    // ln|t| = 9.03 corresponds to an 8365-token vocabulary.
    let vocab = 8365;
    assert!(((vocab as f64).ln() - 9.03).abs() < 0.002);
    for (loss, h_r) in [(0.435, 0.952), (5.937, 0.343), (5.815, 0.356)] {
        assert!((entropy_ratio(loss, vocab).unwrap() - h_r).abs() < 0.002, "{loss}");
    }
    assert_eq!(entropy_ratio(0.0, 2).unwrap(), 1.0);
    assert_eq!(entropy_ratio((V as f64).ln(), V).unwrap(), 0.0);
    assert!(matches!(entropy_ratio(-0.1, V), Err(MetricsError::NegativeLoss(_))));
    assert!(matches!(entropy_ratio(0.1, 1), Err(MetricsError::VocabTooSmall(1))));
}

#[test]
fn token_accuracy_examples() {
    let pad = 9;
    assert_eq!(token_accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4], pad).unwrap(), 0.75);
    // Pad targets are not counted whatever was predicted there.
    assert_eq!(token_accuracy(&[1, 5, 3], &[1, pad, 0], pad).unwrap(), 0.5);
    assert!(matches!(token_accuracy(&[1, 2], &[pad, pad], pad), Err(MetricsError::AllPad)));
    assert!(matches!(token_accuracy(&[1], &[1, 2], pad), Err(MetricsError::LengthMismatch { .. })));
}

#[test]
fn argmax_takes_first_maximum() {
    let t = Tensor::<f32>::new(vec![2, 3], vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![1, 0]);
}

fn groups(tokens: &[TokenId], model: &memlab::architectures::Built) -> Vec<Vec<TaskBatch>> {
    let task = lookup_task("causal", &TaskOptions::default()).unwrap();
    vec![task.batches(model, tokens, 2).unwrap()]
}

#[test]
fn evaluate_perfect_and_uniform_models() {
    let arch = Architecture::Decoder { model: ModelConfig::mixer(8, 1, 6, V) };
    let model = arch.build().unwrap();
    let mut params: ParamStore = model.init_params(0);

    // Zero head: uniform logits everywhere.
    let names: Vec<String> = params.names().filter(|n| n.contains("lm_head")).map(str::to_owned).collect();
    assert_eq!(names.len(), 2);
    for n in &names {
        let t = params.get_mut(n).unwrap();
        t.data_mut().fill(0.0);
    }
    let tokens: Vec<TokenId> = (0..12).map(|i| (i % 5) as TokenId).collect();
    let r = evaluate_model(&model, &params, &groups(&tokens, &model)).unwrap();
    assert!((r.loss - (V as f64).ln()).abs() < 1e-6);
    assert!(r.h_r.abs() < 1e-6);
    assert_eq!(r.n_evaluated, 10);
    // Ties go to token 0; two of the ten targets are 0.
    assert_eq!(r.token_accuracy, 0.2);

    // A head that always says 7, evaluated on a stream of 7s.
    let bias = names.iter().find(|n| n.ends_with(".b")).unwrap();
    params.get_mut(bias).unwrap().data_mut()[7] = 60.0;
    let sevens = vec![7; 12];
    let r = evaluate_model(&model, &params, &groups(&sevens, &model)).unwrap();
    assert!(r.loss < 1e-20);
    assert!((r.h_r - 1.0).abs() < 1e-12);
    assert_eq!(r.token_accuracy, 1.0);

    let again = evaluate_model(&model, &params, &groups(&sevens, &model)).unwrap();
    assert_eq!(r, again);

    let pad = SpecialTokens::for_vocab(V).pad;
    assert!(evaluate_model(&model, &params, &groups(&[pad; 12], &model)).is_err());
}

proptest! {
    #[test]
    fn entropy_ratio_decreases_with_loss(a in 0.0f64..20.0, b in 0.0f64..20.0, v in 2usize..100_000) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(entropy_ratio(lo, v).unwrap() >= entropy_ratio(hi, v).unwrap());
    }

    #[test]
    fn accuracy_ignores_appended_pad(
        pairs in proptest::collection::vec((0u32..8, 0u32..8), 1..50),
        extra in proptest::collection::vec(0u32..9, 0..20),
    ) {
        let pad = 8;
        let (mut pred, mut tgt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let base = token_accuracy(&pred, &tgt, pad).unwrap();
        pred.extend(&extra);
        tgt.extend(std::iter::repeat(pad).take(extra.len()));
        prop_assert_eq!(base, token_accuracy(&pred, &tgt, pad).unwrap());
    }

    #[test]
    fn argmax_invariant_under_monotone_maps(
        xs in proptest::collection::vec(-10.0f64..10.0, 12),
        scale in 0.1f64..5.0,
        shift in -5.0f64..5.0,
    ) {
        let t = Tensor::<f64>::new(vec![3, 4], xs.clone()).unwrap();
        let mapped = Tensor::<f64>::new(vec![3, 4], xs.iter().map(|x| (scale * x + shift).tanh() * 3.0 + x.exp()).collect()).unwrap();
        prop_assert_eq!(argmax_rows(&t), argmax_rows(&mapped));
    }
}
