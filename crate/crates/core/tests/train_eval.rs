mod common;

use common::{grad_check, rand_tensor, rng};
use mcg_core::data::{generate_synthetic, SamplePair, SynthConfig};
use mcg_core::metrics::{confusion, metrics, ConfusionCounts};
use mcg_core::model::{ChangeDetector, EncoderConfig, ModelConfig, ParamStore};
use mcg_core::train::{evaluate, loss, train, Adam, Evaluation, LossWeights, TrainConfig, LOG_HEADER};
use mcg_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn log_probs_of(p1: &[f64], h: usize, w: usize) -> Tensor<f64> {
    let mut v: Vec<f64> = p1.iter().map(|p| (1.0 - p).ln()).collect();
    v.extend(p1.iter().map(|p| p.ln()));
    Tensor::new([2, h, w], v).unwrap()
}

fn loss_values(lp: &Tensor<f64>, label: &[u8]) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let v = tape.leaf(lp);
    let t = loss(&mut tape, v, label, LossWeights::default()).unwrap();
    (tape.value(t.ce)[0], tape.value(t.dice)[0], tape.value(t.total)[0])
}

#[test]
fn uniform_prediction_on_empty_label() {
    let (ce, dice, total) = loss_values(&log_probs_of(&[0.5; 4], 2, 2), &[0; 4]);
    assert!((ce - 2f64.ln()).abs() < 1e-12);
    assert!((dice - 2.0 / 3.0).abs() < 1e-12);
    assert!((total - ce - dice).abs() < 1e-12);
}

#[test]
fn confident_correct_prediction_has_near_zero_loss() {
    let label: Vec<u8> = (0..16).map(|q| (q % 2) as u8).collect();
    let p1: Vec<f64> = label.iter().map(|&y| if y == 1 { 1.0 - 1e-12 } else { 1e-12 }).collect();
    let (ce, dice, _) = loss_values(&log_probs_of(&p1, 4, 4), &label);
    assert!(ce < 1e-10);
    assert!(dice < 1e-10);
}

#[test]
fn loss_rejects_bad_labels_and_extents() {
    let lp = log_probs_of(&[0.5; 4], 2, 2);
    let mut tape = Tape::new();
    let v = tape.leaf(&lp);
    assert!(matches!(loss(&mut tape, v, &[0, 1, 2, 0], LossWeights::default()), Err(Error::Label(2))));
    assert!(matches!(loss(&mut tape, v, &[0, 1, 0], LossWeights::default()), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_terms_are_bounded(n in 1usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let p1: Vec<f64> = (0..n).map(|_| r.random_range(1e-6..1.0 - 1e-6)).collect();
        let label: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let (ce, dice, _) = loss_values(&log_probs_of(&p1, 1, n), &label);
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dice));
    }
}

#[test]
fn loss_gradient() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let logits = rand_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
        let label: Vec<u8> = (0..12).map(|_| r.random_range(0..2)).collect();
        let w = LossWeights {
            ce: r.random_range(0.1..2.0),
            dice: r.random_range(0.1..2.0),
        };
        let err = grad_check(&[logits], &|t, v| {
            let lp = t.log_softmax_channels(v[0])?;
            Ok(loss(t, lp, &label, w)?.total)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

fn two_params() -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("a", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    s.add("b", Tensor::new([2], vec![1.0, 1.0]).unwrap());
    s
}

#[test]
fn first_adam_step_moves_by_lr_against_the_sign() {
    let mut p = two_params();
    let before: Vec<f64> = p.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let grads = vec![vec![0.3, -4.0, 1e-3], vec![2.0, -2.0]];
    let mut adam = Adam::new(&p, 0.01, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &grads);
    assert_eq!(adam.steps_taken(), 1);
    let after: Vec<f64> = p.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for ((b, a), g) in before.iter().zip(&after).zip(grads.iter().flatten()) {
        let want = -0.01 * g / (g.abs() + 1e-8);
        assert!((a - b - want).abs() < 1e-12, "{a} {b} {want}");
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut p = two_params();
    let before = p.clone();
    let mut adam = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
    for _ in 0..50 {
        adam.step(&mut p, &[vec![0.0; 3], vec![0.0; 2]]);
    }
    assert_eq!(p.checksum(), before.checksum());
}

#[test]
fn identical_gradients_give_identical_updates() {
    let mut p = two_params();
    let mut adam = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
    for k in 0..10 {
        let g = (k as f64 * 0.7).sin();
        adam.step(&mut p, &[vec![g, 0.0, 0.0], vec![g, g]]);
    }
    let b = p.iter().nth(1).unwrap().1.data();
    assert_eq!(b[0], b[1]);
}

#[test]
fn confusion_examples() {
    assert_eq!(confusion(&[1; 4], &[1; 4]).unwrap(), ConfusionCounts::new(4, 0, 0, 0));
    assert_eq!(confusion(&[1; 4], &[0; 4]).unwrap(), ConfusionCounts::new(0, 0, 4, 0));
    assert!(matches!(confusion(&[1; 4], &[0; 3]), Err(Error::Shape(_))));
}

#[test]
fn metrics_examples() {
    let m = metrics(&ConfusionCounts::new(1, 1, 0, 0));
    for v in [m.oa, m.precision, m.recall, m.f1, m.iou, m.kc] {
        assert_eq!(v, 1.0);
    }
    let m = metrics(&ConfusionCounts::new(2, 6, 1, 1));
    let third = 2.0 / 3.0;
    assert!((m.precision - third).abs() < 1e-15);
    assert!((m.recall - third).abs() < 1e-15);
    assert!((m.f1 - third).abs() < 1e-15);
    assert!((m.iou - 0.5).abs() < 1e-15);
    assert!((m.oa - 0.8).abs() < 1e-15);
    assert!((m.kc - 0.22 / 0.42).abs() < 1e-12);
    assert!((m.kc - 0.5238).abs() < 1e-4);
    assert!(!m.undefined.any());
}

#[test]
fn zero_denominators_are_flagged() {
    let m = metrics(&ConfusionCounts::new(0, 5, 0, 0));
    assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
    assert!(m.undefined.precision && m.undefined.recall && m.undefined.f1 && m.undefined.iou);
    let m = metrics(&ConfusionCounts::default());
    assert!(m.undefined.oa && m.undefined.kc);
}

fn brute_force(pred: &[u8], truth: &[u8]) -> ConfusionCounts {
    let mut c = [0u64; 4];
    for q in 0..pred.len() {
        let k = match (pred[q], truth[q]) {
            (1, 1) => 0,
            (0, 0) => 1,
            (1, 0) => 2,
            _ => 3,
        };
        c[k] += 1;
    }
    ConfusionCounts::new(c[0], c[1], c[2], c[3])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_matches_brute_force(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut r = rng(seed);
        let pred: Vec<u8> = (0..256).map(|_| u8::from(r.random_bool(density))).collect();
        let truth: Vec<u8> = (0..256).map(|_| u8::from(r.random_bool(0.5))).collect();
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c, brute_force(&pred, &truth));
        prop_assert_eq!(c.total(), 256);
    }

    #[test]
    fn iou_is_f1_over_two_minus_f1(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let m = metrics(&ConfusionCounts::new(tp, tn, fp, fn_));
        if !m.undefined.f1 {
            prop_assert!((m.iou - m.f1 / (2.0 - m.f1)).abs() < 1e-12);
        }
    }

    #[test]
    fn self_agreement_scores_one(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut mask: Vec<u8> = (0..64).map(|_| u8::from(r.random_bool(0.3))).collect();
        mask[0] = 1;
        mask[1] = 0;
        let m = metrics(&confusion(&mask, &mask).unwrap());
        for v in [m.oa, m.precision, m.recall, m.f1, m.iou, m.kc] {
            prop_assert_eq!(v, 1.0);
        }
    }
}

#[test]
fn evaluation_totals_are_sums_of_samples() {
    let counts = vec![
        ("a".to_string(), ConfusionCounts::new(1, 2, 3, 4)),
        ("b".to_string(), ConfusionCounts::new(5, 6, 7, 8)),
    ];
    let e = Evaluation::from_counts(counts);
    assert_eq!(e.total, ConfusionCounts::new(6, 8, 10, 12));
    assert_eq!(e.metrics, metrics(&e.total));
}

fn tiny_model(use_flow: bool, use_2ds: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_channels: 4,
            state_dim: 2,
            stage_depths: [1, 1, 1, 1],
            ..EncoderConfig::default()
        },
        decoder_channels: 4,
        stc_blocks: 1,
        use_flow,
        use_2ds,
    }
}

fn tiny_data(count: usize) -> Vec<SamplePair> {
    generate_synthetic(&SynthConfig {
        count,
        height: 32,
        width: 32,
        shape_size: (6, 12),
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_train(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 2,
        steps: 3,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_data(3);
    let mut model = ChangeDetector::<f32>::new(tiny_model(true, true), 0).unwrap();
    let before = model.params.checksum();
    let report = train(&mut model, &data, None, &tiny_train(0.0), |_| Ok(())).unwrap();
    assert_eq!(report.losses.len(), 3);
    assert_eq!(model.params.checksum(), before);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(4);
    let run = || {
        let mut model = ChangeDetector::<f32>::new(tiny_model(true, true), 7).unwrap();
        let mut rows = Vec::new();
        let report = train(&mut model, &data, Some(&data[..2]), &tiny_train(1e-3), |r| {
            rows.push(r.csv());
            Ok(())
        })
        .unwrap();
        (report.losses, rows, model.params.checksum())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.1.len(), 3);
    assert_eq!(a.1[2].split(',').count(), LOG_HEADER.split(',').count());
    assert!(a.1[0].ends_with(",,,,,,"));
}

#[test]
fn ablation_flags_give_different_checkpoints() {
    let data = tiny_data(2);
    let sums: Vec<u64> = [(true, true), (false, true), (true, false)]
        .into_iter()
        .map(|(f, s)| {
            let mut model = ChangeDetector::<f32>::new(tiny_model(f, s), 0).unwrap();
            train(&mut model, &data, None, &tiny_train(1e-3), |_| Ok(())).unwrap();
            model.params.checksum()
        })
        .collect();
    assert_ne!(sums[0], sums[1]);
    assert_ne!(sums[0], sums[2]);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_data(1);
    let mut model = ChangeDetector::<f32>::new(tiny_model(true, true), 0).unwrap();
    for cfg in [
        TrainConfig { lr: -1.0, ..tiny_train(0.0) },
        TrainConfig {
            loss_weights: LossWeights { ce: 0.0, dice: 0.0 },
            ..tiny_train(0.0)
        },
        TrainConfig { batch_size: 0, ..tiny_train(0.0) },
    ] {
        assert!(matches!(train(&mut model, &data, None, &cfg, |_| Ok(())), Err(Error::Config(_))));
    }
    assert!(matches!(train(&mut model, &[], None, &tiny_train(0.0), |_| Ok(())), Err(Error::Config(_))));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let data = tiny_data(2);
    let mut model = ChangeDetector::<f32>::new(tiny_model(true, true), 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e30,
        steps: 20,
        ..tiny_train(0.0)
    };
    let r = train(&mut model, &data, None, &cfg, |_| Ok(()));
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
}

#[test]
fn evaluation_counts_every_pixel() {
    let data = tiny_data(3);
    let model = ChangeDetector::<f32>::new(tiny_model(true, true), 0).unwrap();
    let e = evaluate(&model, &data).unwrap();
    assert_eq!(e.per_sample.len(), 3);
    assert_eq!(e.total.total(), 3 * 32 * 32);
    assert_eq!(e.per_sample[0].0, data[0].id);
}
