use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use predgen_core::data::{Dataset, DatasetKind, DatasetSpec, Example, Split, Target, TaskKind};
use predgen_core::harness::{prepare_with, Regime, RunConfig, Trainer};
use predgen_core::losses::writer_ce_node;
use predgen_core::math::optim::BoundParams;
use predgen_core::math::{relative_error, Adam, Graph, NumericArray, ParamStore, Var};
use predgen_core::model::{
    forward, forward_packed, generate, init_params, pool, sequence_log_prob, Checkpoint, HiddenStates, ModelConfig,
    PoolSpec, RngState, SequenceRole, TokenSequence, Vocab,
};

fn config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        context_len: 16,
        vocab_size: Vocab::new().size(),
        seed: 3,
    }
}

fn input(text: &str) -> TokenSequence {
    TokenSequence::input(&Vocab::new(), text).unwrap()
}

#[test]
fn shapes_of_a_single_token() {
    let cfg = config(8, 1);
    let params = init_params(&cfg).unwrap();
    let (logits, states) = forward(&params, &cfg, &input("a")).unwrap();
    assert_eq!(logits.shape(), &[1, cfg.vocab_size]);
    assert_eq!(states.values.shape(), &[1, 8]);
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_alone() {
    let cfg = config(16, 2);
    let params = init_params(&cfg).unwrap();
    let (a, _) = forward(&params, &cfg, &input("abcdef")).unwrap();
    let (b, _) = forward(&params, &cfg, &input("abcxef")).unwrap();
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t), "row {t}");
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn forward_is_deterministic() {
    let cfg = config(16, 2);
    let (a, sa) = forward(&init_params(&cfg).unwrap(), &cfg, &input("hello")).unwrap();
    let (b, sb) = forward(&init_params(&cfg).unwrap(), &cfg, &input("hello")).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn packing_matches_separate_forwards() {
    let cfg = config(16, 2);
    let params = init_params(&cfg).unwrap();
    let seqs = [input("ab"), input("cdef"), input("g")];
    let views: Vec<&[usize]> = seqs.iter().map(|s| s.ids()).collect();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let packed = forward_packed(&mut g, &bound, &cfg, &views).unwrap();
    let logits = g.value(packed.logits);
    for (seq, span) in seqs.iter().zip(&packed.spans) {
        let (alone, _) = forward(&params, &cfg, seq).unwrap();
        for (t, r) in span.clone().enumerate() {
            let diff: f64 = alone.row(t).iter().zip(logits.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
        }
    }
}

#[test]
fn context_overflow_is_an_error() {
    let cfg = config(8, 1);
    let params = init_params(&cfg).unwrap();
    assert!(forward(&params, &cfg, &input("abcdefghijklmnopq")).is_err());
    assert!(generate(&params, &cfg, &input("abcdefghijklmno"), 4).is_err());
}

#[test]
fn factorization_matches_single_step_forwards() {
    let cfg = config(16, 2);
    let params = init_params(&cfg).unwrap();
    let prefix = input("ab");
    let target: Vec<usize> = input("cde").ids().to_vec();
    let joint = sequence_log_prob(&params, &cfg, prefix.ids(), &target).unwrap();
    let mut sum = 0.0;
    let mut ctx = prefix.ids().to_vec();
    for &tok in &target {
        let seq = TokenSequence::new(ctx.clone(), SequenceRole::Input, cfg.vocab_size).unwrap();
        let (logits, _) = forward(&params, &cfg, &seq).unwrap();
        let row = logits.row(ctx.len() - 1);
        let lse = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - lse).exp()).sum::<f64>().ln() + lse;
        sum += row[tok] - z;
        ctx.push(tok);
    }
    assert!((joint - sum).abs() < 1e-8, "{joint} vs {sum}");
}

#[test]
fn zero_new_tokens_generates_nothing() {
    let cfg = config(8, 1);
    let params = init_params(&cfg).unwrap();
    let out = generate(&params, &cfg, &input("ab"), 0).unwrap();
    assert!(out.tokens.is_empty());
    assert!(out.states.is_empty());
}

#[test]
fn eos_model_stops_after_one_token() {
    let cfg = config(8, 1);
    let mut params = init_params(&cfg).unwrap();
    // Constant final states pointing at the EOS column of the head.
    params.insert("ln_f.gain", NumericArray::zeros(&[1, 8]));
    params.insert("ln_f.bias", NumericArray::row_vector(vec![1.0; 8]));
    let mut head = NumericArray::zeros(&[8, cfg.vocab_size]);
    for r in 0..8 {
        head.set(r, Vocab::EOS, 1.0);
    }
    params.insert("lm_head.w", head);
    let out = generate(&params, &cfg, &input("abc"), 5).unwrap();
    assert_eq!(out.tokens.ids(), &[Vocab::EOS]);
    assert_eq!(out.states.len(), 1);
    assert_eq!(out.states.span_offset, 3);
}

#[test]
fn argmax_ties_go_to_the_lower_id() {
    let cfg = config(8, 1);
    let mut params = init_params(&cfg).unwrap();
    params.insert("lm_head.w", NumericArray::zeros(&[8, cfg.vocab_size]));
    let out = generate(&params, &cfg, &input("abc"), 2).unwrap();
    assert_eq!(out.tokens.ids(), &[Vocab::PAD, Vocab::PAD]);
}

#[test]
fn memorized_sum_is_generated() {
    let dataset = Dataset {
        name: "one".into(),
        task: TaskKind::Regression,
        num_classes: 0,
        decimals: 0,
        range: (0.0, 10.0),
        examples: vec![Example {
            input_text: "2+3=".into(),
            target: Target::Real(5.0),
            split: Split::Train,
        }],
        replaced_chars: 0,
    };
    let mut cfg = RunConfig::new(Regime::Generator, DatasetSpec::new(DatasetKind::Arithmetic));
    cfg.model.d_model = 16;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.optimizer.batch_size = 1;
    cfg.optimizer.learning_rate = 3e-3;
    let prepared = prepare_with(&cfg, dataset).unwrap();
    let model = prepared.model.clone();
    let max_new = prepared.max_target;
    let mut trainer = Trainer::new(cfg, prepared).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..1000 {
        loss = trainer.step().unwrap().combined;
        if loss < 1e-3 {
            break;
        }
    }
    assert!(loss < 1e-3, "{loss}");
    let vocab = Vocab::new();
    let mut prefix = vocab.encode("2+3=").unwrap();
    prefix.push(Vocab::SEP);
    let prefix = TokenSequence::new(prefix, SequenceRole::Input, model.vocab_size).unwrap();
    let out = generate(trainer.params(), &model, &prefix, max_new).unwrap();
    assert_eq!(out.tokens.ids(), &[vocab.id_of('5').unwrap(), Vocab::EOS]);
}

fn model_loss(params: &ParamStore, cfg: &ModelConfig, seqs: &[Vec<usize>], trainable: bool) -> (Graph, Var, Option<BoundParams>) {
    let mut g = Graph::new();
    let bound = if trainable { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let views: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let fwd = forward_packed(&mut g, &bound, cfg, &views).unwrap();
    let targets: Vec<(usize, usize)> = fwd
        .spans
        .iter()
        .zip(seqs)
        .flat_map(|(span, s)| (span.start..span.end - 1).map(move |r| (r, s[r - span.start + 1])))
        .collect();
    let loss = writer_ce_node(&mut g, fwd.logits, &targets).unwrap();
    (g, loss, trainable.then_some(bound))
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = config(8, 2);
    let mut params = init_params(&cfg).unwrap();
    // Larger weights than the init so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let p = params.get_mut(name).unwrap();
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let vocab = Vocab::new();
    let seqs = vec![vocab.encode("abc d").unwrap(), vocab.encode("2+3=5").unwrap()];
    let (g, loss, bound) = model_loss(&params, &cfg, &seqs, true);
    let mut grads = g.backward(loss).unwrap();
    let analytic = bound.unwrap().collect(&mut grads);
    let h = 1e-5;
    for name in &names {
        let base = params.get(name).unwrap().clone();
        let mut numeric = NumericArray::zeros(base.shape());
        for i in 0..base.len() {
            let mut probe = params.clone();
            probe.get_mut(name).unwrap().data_mut()[i] = base.data()[i] + h;
            let (gp, lp, _) = model_loss(&probe, &cfg, &seqs, false);
            probe.get_mut(name).unwrap().data_mut()[i] = base.data()[i] - h;
            let (gm, lm, _) = model_loss(&probe, &cfg, &seqs, false);
            numeric.data_mut()[i] = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
        }
        let got = analytic.get(name).cloned().unwrap_or_else(|| NumericArray::zeros(base.shape()));
        if name.ends_with("attn.k.b") {
            // softmax ignores a shift shared by every key
            assert!(got.data().iter().all(|g| g.abs() < 1e-12), "{name}: {got:?}");
            assert!(numeric.data().iter().all(|g| g.abs() < 1e-8), "{name}: {numeric:?}");
            continue;
        }
        let err = relative_error(&got, &numeric);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn training_reduces_loss() {
    let cfg = config(16, 1);
    let mut params = init_params(&cfg).unwrap();
    let vocab = Vocab::new();
    let seqs = vec![vocab.encode("abcabc").unwrap()];
    let mut adam = Adam::new(1e-2);
    let (g, l0, _) = model_loss(&params, &cfg, &seqs, false);
    let first = g.value(l0).item();
    for _ in 0..50 {
        let (g, loss, bound) = model_loss(&params, &cfg, &seqs, true);
        let mut grads = g.backward(loss).unwrap();
        adam.step(&mut params, &bound.unwrap().collect(&mut grads));
    }
    let (g, l1, _) = model_loss(&params, &cfg, &seqs, false);
    assert!(g.value(l1).item() < 0.5 * first);
}

#[test]
fn pool_examples() {
    let s = HiddenStates {
        values: NumericArray::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap(),
        span_offset: 0,
    };
    assert_eq!(pool(&s, PoolSpec::Mean).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(pool(&s, PoolSpec::LastToken).unwrap().data(), &[3.0, 3.0]);
    let one = s.slice(0..1);
    assert_eq!(pool(&one, PoolSpec::Mean).unwrap(), pool(&one, PoolSpec::LastToken).unwrap());
    assert!(pool(&s.slice(0..0), PoolSpec::Mean).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = config(8, 1);
    let params = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    rng.set_stream(4);
    let _: u64 = rng.gen();
    let ck = Checkpoint::new(cfg.clone(), RngState::capture(11, &rng), params.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, cfg);
    for (name, value) in params.iter() {
        assert_eq!(back.params.get(name).unwrap(), value, "{name}");
    }
    let mut restored = back.rng_state.restore().unwrap();
    assert_eq!(restored.gen::<u64>(), rng.gen::<u64>());
}

#[test]
fn corrupt_checkpoint_reports_location() {
    let err = Checkpoint::from_json("{\n  \"config\": 3").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn vocab_specials_and_unknown_symbols() {
    let v = Vocab::new();
    assert_eq!(v.size(), 45);
    assert!(Vocab::is_special(Vocab::EOS));
    assert!(v.encode("abc!").is_err());
    let (clean, replaced) = v.sanitize("ab!c?");
    assert_eq!(clean, "ab c ");
    assert_eq!(replaced, 2);
    assert!(TokenSequence::new(vec![99], SequenceRole::Input, 45).is_err());
    assert!(TokenSequence::gold(&v, "12").unwrap().ids().ends_with(&[Vocab::EOS]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(text in "[0-9a-z .+=-]{0,30}") {
        let v = Vocab::new();
        prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), text);
    }

    #[test]
    fn pool_is_deterministic(data in prop::collection::vec(-5.0f64..5.0, 12)) {
        let s = HiddenStates { values: NumericArray::new(vec![4, 3], data).unwrap(), span_offset: 2 };
        for spec in [PoolSpec::Mean, PoolSpec::LastToken] {
            prop_assert_eq!(pool(&s, spec).unwrap(), pool(&s, spec).unwrap());
        }
        let last = pool(&s, PoolSpec::LastToken).unwrap();
        prop_assert_eq!(last.data(), s.values.row(3));
    }
}
