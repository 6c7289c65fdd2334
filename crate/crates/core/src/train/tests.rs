use super::*;
use crate::data::{Batch, SEP};

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        max_positions: 16,
        dropout_rate: 0.0,
    }
}

fn ra_cfg() -> RaConfig {
    RaConfig { n_heads: 2, predictor_hidden: None }
}

fn toy_pairs() -> Vec<DialoguePair> {
    (0..6)
        .map(|i| DialoguePair {
            context: vec![5 + i % 4, 6 + i % 5, SEP],
            response: vec![7 + i % 3, 5 + i % 2, crate::data::EOS],
        })
        .collect()
}

fn cfg(use_ss: bool, use_ra: bool) -> TrainConfig {
    TrainConfig { use_ss, use_ra, batch_size: 3, epochs: 3, lr: 1e-2, ..TrainConfig::default() }
}

#[test]
fn lambda_examples() {
    let s = LambdaSchedule::new(10, 0.2).unwrap();
    assert_eq!(s.lambda_at(0), 1.0);
    assert!((s.lambda_at(5) - 0.6).abs() < 1e-15);
    assert_eq!(s.lambda_at(10), 0.2);
    assert_eq!(s.lambda_at(1000), 0.2);
    let traj: Vec<f64> = (0..30).map(|t| s.lambda_at(t)).collect();
    assert!(traj.windows(2).all(|w| w[1] <= w[0]));
    assert!(LambdaSchedule::new(0, 0.2).is_err());
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut w = vec![1.5, -2.0];
    let mut st = Moments::default();
    adam_update(&mut w, &[0.0, 0.0], &mut st, 1, &AdamConfig::with_lr(0.1)).unwrap();
    assert_eq!(w, vec![1.5, -2.0]);
    assert_eq!(st.m, vec![0.0, 0.0]);
    assert_eq!(st.v, vec![0.0, 0.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut w = vec![0.0];
    let mut st = Moments::default();
    adam_update(&mut w, &[1.0], &mut st, 1, &AdamConfig::with_lr(0.1)).unwrap();
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
    assert!((w[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn adam_minimises_a_quadratic_bowl() {
    let mut w = vec![0.0];
    let mut st = Moments::default();
    let cfg = AdamConfig::with_lr(0.05);
    for t in 1..=2000 {
        let g = 2.0 * (w[0] - 3.0);
        adam_update(&mut w, &[g], &mut st, t, &cfg).unwrap();
    }
    assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
}

#[test]
fn adam_rejects_nan_gradients() {
    let mut w = vec![0.0];
    let r = adam_update(&mut w, &[f64::NAN], &mut Moments::default(), 1, &AdamConfig::with_lr(0.1));
    assert!(matches!(r, Err(RadError::Numeric { .. })));
}

fn first_batch(pairs: &[DialoguePair]) -> Batch {
    Batch::from_pairs(&pairs.iter().take(3).collect::<Vec<_>>())
}

fn one_step(use_ss: bool, use_ra: bool, mu: f64) -> LossBreakdown {
    let c = TrainConfig { mu, ..cfg(use_ss, use_ra) };
    let model = RadModel::new(tiny_model_cfg(), ra_cfg(), use_ra, c.seed).unwrap();
    let mut t = Trainer::new(model, c, 2).unwrap();
    t.train_step(&first_batch(&toy_pairs()), 0, 0).unwrap()
}

#[test]
fn plain_variant_has_no_ra_term() {
    let b = one_step(false, false, 4.0);
    assert_eq!(b.gamma, 1.0);
    assert_eq!(b.loss_ra, 0.0);
    assert!((b.loss_total - b.loss_m).abs() < 1e-12);
}

#[test]
fn full_variant_mixes_losses() {
    let b = one_step(true, true, 4.0);
    assert_eq!(b.gamma, 0.5);
    assert!(b.loss_ra > 0.0);
    assert!((b.loss_total - (0.5 * b.loss_m + 0.5 * b.loss_ra)).abs() < 1e-12);
}

#[test]
fn step_is_reproducible() {
    for (ss, ra) in [(false, false), (true, false), (false, true), (true, true)] {
        assert_eq!(one_step(ss, ra, 4.0), one_step(ss, ra, 4.0));
    }
}

#[test]
fn ss_without_replacements_matches_base() {
    // μ = 1e12 puts p at about 1e-12, so no position is replaced.
    assert_eq!(one_step(true, false, 1e12), one_step(false, false, 1e12));
    assert_eq!(one_step(true, true, 1e12), one_step(false, true, 1e12));
}

#[test]
fn predictor_gets_no_lm_gradient_at_lambda_one() {
    let model = RadModel::new(tiny_model_cfg(), ra_cfg(), true, 1).unwrap();
    let pair = &toy_pairs()[0];
    let mut g = Graph::new();
    let mp = model.transformer.bind(&mut g);
    let rp = model.ra.bind(&mut g);
    let settings = LossSettings { use_ra: true, lambda: 1.0, gamma: 0.5 };
    let l = pair_loss(&mut g, &mp, &rp, &model.transformer.config, &model.ra.config, pair, None, settings, None).unwrap();
    g.backward(l.loss_m).unwrap();
    for (name, v) in rp.iter() {
        let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        let max = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if name.starts_with("ra.pred") {
            assert_eq!(max, 0.0, "{name}");
        }
    }
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let mut model = RadModel::new(tiny_model_cfg(), ra_cfg(), false, 0).unwrap();
    model.transformer.params.get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, cfg(false, false), 2).unwrap();
    let err = t.train_step(&first_batch(&toy_pairs()), 0, 7).unwrap_err();
    match err {
        RadError::NonFinite { step, batch_index, .. } => assert_eq!((step, batch_index), (0, 7)),
        RadError::Numeric { .. } => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_invariants_hold() {
    let (_, report) = run_training(&toy_pairs(), &tiny_model_cfg(), &ra_cfg(), &cfg(true, true), &mut |_, _| Ok(())).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.total_steps, 6);
    for e in &report.epochs {
        assert!((e.loss_total - (e.gamma * e.loss_m + (1.0 - e.gamma) * e.loss_ra)).abs() < 1e-12);
    }
    assert_eq!(report.epochs[0].lambda_start, 1.0);
    assert_eq!(report.epochs[1].lambda_start, 0.2);
    assert!(report.epochs.windows(2).all(|w| w[1].p > w[0].p && w[1].lambda_start <= w[0].lambda_end));
    let text = report.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(!text.contains("wall"));
}

#[test]
fn training_lowers_the_loss() {
    let c = TrainConfig { epochs: 30, ..cfg(false, false) };
    let (_, report) = run_training(&toy_pairs(), &tiny_model_cfg(), &ra_cfg(), &c, &mut |_, _| Ok(())).unwrap();
    let first = report.epochs[0].loss_m;
    let last = report.epochs.last().unwrap().loss_m;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn max_steps_cuts_training_short() {
    let c = TrainConfig { max_steps: Some(3), ..cfg(false, true) };
    let mut seen = Vec::new();
    let (_, report) = run_training(&toy_pairs(), &tiny_model_cfg(), &ra_cfg(), &c, &mut |e, _| {
        seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(report.total_steps, 3);
    assert_eq!(seen, vec![0, 1]);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lambda_floor: -0.1, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(RadError::Config(_))), "{bad:?}");
    }
}
