use proptest::prelude::*;

use predgen_core::adapters::ClsSpec;
use predgen_core::data::{DatasetKind, DatasetSpec, Split};
use predgen_core::harness::{
    ablate, ablation_csv, evaluate, losses_csv, prepare, score, train, Axis, Framed, ModelSection, OptimizerSection,
    Output, Pooling, Regime, RunConfig, SamplingMode, Trainer,
};
use predgen_core::losses::{Combiner, OrderedPenalty};

fn tiny(regime: Regime, kind: DatasetKind, steps: u64) -> RunConfig {
    RunConfig {
        model: ModelSection {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: None,
        },
        optimizer: OptimizerSection {
            learning_rate: 3e-3,
            steps,
            batch_size: 8,
        },
        seed: 4,
        ..RunConfig::new(
            regime,
            DatasetSpec {
                train_size: 48,
                test_size: 16,
                ..DatasetSpec::new(kind)
            },
        )
    }
}

#[test]
fn regime_specific_keys() {
    let base = |regime| tiny(regime, DatasetKind::ToyClassification, 1);
    let mut c = base(Regime::Predictor);
    c.max_steps_for_sampling = Some(5);
    assert!(c.validate().is_err());
    let mut c = base(Regime::Predictor);
    c.loss = Some(Combiner::Wdal);
    assert!(c.validate().is_err());
    let mut c = base(Regime::Generator);
    c.cls_spec = Some(ClsSpec::MeanOfGenerated);
    assert!(c.validate().is_err());
    let mut c = base(Regime::Generator);
    c.pooling = Some(Pooling::Mean);
    assert!(c.validate().is_err());
    let mut c = base(Regime::Predgen);
    c.pooling = Some(Pooling::Mean);
    assert!(c.validate().is_err());
    let mut c = base(Regime::Predgen);
    c.ordered_alpha = Some(OrderedPenalty::uniform(3));
    assert!(c.validate().is_err());
    let mut c = base(Regime::Predgen);
    c.optimizer.learning_rate = 0.0;
    assert!(c.validate().is_err());
    let mut c = tiny(Regime::Predgen, DatasetKind::ToyRegression, 1);
    c.ordered_alpha = Some(OrderedPenalty::uniform(2));
    assert!(Trainer::new(c.clone(), prepare(&c).unwrap()).is_err());
}

#[test]
fn config_json_round_trip() {
    let mut cfg = tiny(Regime::Predgen, DatasetKind::ToyRegression, 3);
    cfg.sampling_granularity = Some(SamplingMode::Token);
    cfg.loss = Some(Combiner::Adaptive);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn losses_are_reproducible_under_seed() {
    for regime in [Regime::Predictor, Regime::Generator, Regime::Predgen] {
        let mut cfg = tiny(regime, DatasetKind::ToyRegression, 6);
        if regime == Regime::Predgen {
            cfg.max_steps_for_sampling = Some(3);
            cfg.sampling_granularity = Some(SamplingMode::Token);
        }
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(losses_csv(&a.losses), losses_csv(&b.losses), "{regime:?}");
        assert_eq!(a.test, b.test);
        let c = train(&cfg.with_seed(5)).unwrap();
        assert_ne!(losses_csv(&a.losses), losses_csv(&c.losses));
    }
}

#[test]
fn losses_stay_finite() {
    for combiner in Combiner::ALL {
        let mut cfg = tiny(Regime::Predgen, DatasetKind::ToyClassification, 5);
        cfg.loss = Some(combiner);
        cfg.max_steps_for_sampling = Some(2);
        let run = train(&cfg).unwrap();
        for l in &run.losses {
            assert!(l.combined.is_finite() && l.writer.unwrap().is_finite() && l.director.unwrap().is_finite());
        }
    }
}

#[test]
fn gold_conditioned_writer_loss_equals_generator_loss_bitwise() {
    let gen_cfg = tiny(Regime::Generator, DatasetKind::ToyClassification, 1);
    let mut pg_cfg = tiny(Regime::Predgen, DatasetKind::ToyClassification, 1);
    pg_cfg.sampling_granularity = Some(SamplingMode::Off);
    let gen = Trainer::new(gen_cfg.clone(), prepare(&gen_cfg).unwrap()).unwrap();
    let mut pg = Trainer::new(pg_cfg.clone(), prepare(&pg_cfg).unwrap()).unwrap();
    for (name, value) in gen.params().iter() {
        assert_eq!(pg.params().get(name).unwrap(), value, "{name}");
    }
    let mut shared = Trainer::new(gen_cfg, prepare(&pg_cfg).unwrap()).unwrap();
    for step in 0..5u64 {
        let batch = shared.next_batch();
        let g = gen.losses_on(&batch, step).unwrap();
        let p = pg.losses_on(&batch, step).unwrap();
        assert_eq!(g.combined.to_bits(), p.writer.unwrap().to_bits(), "step {step}");
    }
    pg.step().unwrap();
}

#[test]
fn director_only_with_flat_weights_tracks_the_generator() {
    let gen_cfg = tiny(Regime::Generator, DatasetKind::ToyRegression, 8);
    let prepared = prepare(&gen_cfg).unwrap();
    let m = prepared.max_target;
    assert!(prepared.train.iter().all(|f| f.target.len() == m));
    let mut pg_cfg = tiny(Regime::Predgen, DatasetKind::ToyRegression, 8);
    pg_cfg.sampling_granularity = Some(SamplingMode::Off);
    pg_cfg.loss = Some(Combiner::DirectorOnly);
    pg_cfg.ordered_alpha = Some(OrderedPenalty::new(vec![1.0 / m as f64; m]).unwrap());
    let gen = train(&gen_cfg).unwrap();
    let pg = train(&pg_cfg).unwrap();
    for (g, p) in gen.losses.iter().zip(&pg.losses) {
        assert!((g.combined - p.combined).abs() <= 1e-9 * g.combined.abs(), "{g:?} {p:?}");
    }
}

#[test]
fn sampled_token_gradient_matches_finite_differences() {
    let mut cfg = tiny(Regime::Predgen, DatasetKind::ToyRegression, 1);
    cfg.sampling_granularity = Some(SamplingMode::Token);
    cfg.max_steps_for_sampling = Some(10);
    let mut trainer = Trainer::new(cfg.clone(), prepare(&cfg).unwrap()).unwrap();
    let batch: Vec<usize> = (0..4).collect();
    let step = 5;
    let (base, grads) = trainer.gradients_on(&batch, step).unwrap();
    let conditioning = trainer.conditioning(&batch, step).unwrap();
    let golds: Vec<&Vec<usize>> = batch.iter().map(|&i| &trainer.prepared().train[i].target).collect();
    assert!(conditioning.iter().zip(&golds).any(|(c, g)| c != *g), "no token was mixed in");
    assert!(base.combined.is_finite());

    let params = trainer.params().clone();
    let h = 1e-5;
    let mut checked = 0;
    for name in ["h0.attn.q.w", "h0.mlp.fc.w", "lm_head.w", "ln_f.gain", "tok_emb"] {
        let value = params.get(name).unwrap();
        let grad = &grads[name];
        for idx in [0, value.len() / 2, value.len() - 1] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            trainer.set_params(plus);
            assert_eq!(trainer.conditioning(&batch, step).unwrap(), conditioning);
            let lp = trainer.losses_on(&batch, step).unwrap().combined;
            trainer.set_params(minus);
            let lm = trainer.losses_on(&batch, step).unwrap().combined;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "{name}[{idx}]: {an} vs {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, 15);
}

#[test]
fn untrained_predictor_is_near_chance() {
    let mut cfg = tiny(Regime::Predictor, DatasetKind::ToyClassification, 0);
    cfg.dataset.train_size = 400;
    cfg.dataset.test_size = 200;
    let run = train(&cfg).unwrap();
    let acc = run.train.accuracy.unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}

#[test]
fn predictor_fits_keyword_classes() {
    let mut cfg = tiny(Regime::Predictor, DatasetKind::ToyClassification, 300);
    cfg.dataset.train_size = 200;
    cfg.dataset.test_size = 100;
    cfg.optimizer.batch_size = 16;
    let run = train(&cfg).unwrap();
    assert!(run.train.accuracy.unwrap() >= 0.95, "{:?}", run.train);
}

#[test]
fn generator_memorizes_small_arithmetic() {
    let mut cfg = tiny(Regime::Generator, DatasetKind::Arithmetic, 3000);
    cfg.dataset.max_operand = 4;
    cfg.dataset.train_size = 40;
    cfg.dataset.test_size = 10;
    cfg.model.d_model = 32;
    let run = train(&cfg).unwrap();
    assert!(run.train.exact_match.unwrap() >= 0.9, "{:?}", run.train);
}

#[test]
fn evaluate_matches_run_metrics() {
    let cfg = tiny(Regime::Generator, DatasetKind::ToyRegression, 3);
    let run = train(&cfg).unwrap();
    assert_eq!(evaluate(&run.params, &cfg, Split::Test).unwrap(), run.test);
    assert_eq!(evaluate(&run.params, &cfg, Split::Train).unwrap(), run.train);
}

#[test]
fn perfect_outputs_score_full_marks() {
    let cfg = tiny(Regime::Generator, DatasetKind::Arithmetic, 1);
    let prepared = prepare(&cfg).unwrap();
    let gold: Vec<&Framed> = prepared.train.iter().collect();
    let outputs: Vec<Output> = gold.iter().map(|f| Output::Real(f.value.real())).collect();
    let m = score(Split::Train, &outputs, &gold, prepared.dataset.range);
    assert_eq!(m.exact_match, Some(1.0));
    assert_eq!(m.mse, Some(0.0));
}

#[test]
fn constant_output_mse_is_spread_around_the_constant() {
    let cfg = tiny(Regime::Generator, DatasetKind::ToyRegression, 1);
    let prepared = prepare(&cfg).unwrap();
    let gold: Vec<&Framed> = prepared.test.iter().collect();
    let ys: Vec<f64> = gold.iter().map(|f| f.value.real().unwrap()).collect();
    let c = 0.4;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    let want = var + (mean - c).powi(2);
    let m = score(Split::Test, &vec![Output::Real(Some(c)); ys.len()], &gold, (0.0, 1.0));
    assert!((m.mse.unwrap() - want).abs() < 1e-12);
}

#[test]
fn ablation_rows_cover_each_axis() {
    let mut base = tiny(Regime::Predgen, DatasetKind::ToyRegression, 2);
    base.dataset.train_size = 16;
    base.dataset.test_size = 4;
    for (axis, rows) in [(Axis::MaxStepsForSampling, 3), (Axis::Granularity, 2), (Axis::LossCombiner, 4)] {
        let out = ablate(&base, axis, &axis.default_values(), &[1]).unwrap();
        assert_eq!(out.len(), rows, "{axis:?}");
        let values: Vec<&str> = out.iter().map(|(r, _)| r.value.as_str()).collect();
        assert_eq!(values, axis.default_values());
        let rows: Vec<_> = out.into_iter().map(|(r, _)| r).collect();
        assert_eq!(ablation_csv(&rows).lines().count(), rows.len() + 1);
    }
    assert!(ablate(&tiny(Regime::Generator, DatasetKind::ToyRegression, 1), Axis::Granularity, &["token".into()], &[1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sequence_mixing_keeps_target_lengths(step in 0u64..20, seed in 0u64..50) {
        let mut cfg = tiny(Regime::Predgen, DatasetKind::ToyRegression, 1);
        cfg.seed = seed;
        cfg.max_steps_for_sampling = Some(10);
        let trainer = Trainer::new(cfg.clone(), prepare(&cfg).unwrap()).unwrap();
        let batch: Vec<usize> = (0..6).collect();
        let cond = trainer.conditioning(&batch, step).unwrap();
        for (&i, c) in batch.iter().zip(&cond) {
            prop_assert_eq!(c.len(), trainer.prepared().train[i].target.len());
        }
        if step == 0 {
            for (&i, c) in batch.iter().zip(&cond) {
                prop_assert_eq!(c, &trainer.prepared().train[i].target);
            }
        }
    }
}
