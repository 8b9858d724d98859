mod common;

use common::{central_diff, rel_err};
use fedimb::config::{ExperimentConfig, Precision};
use fedimb::experiment::{plan, train_plan};
use fedimb::losses::{cross_entropy, dafl, focal, Gamma, LossKind, GAMMA_PARAM};
use fedimb::{Tape, Tensor};
use proptest::prelude::*;

/// Two-class logits giving the target class probability `pt`.
fn logits_for(pt: f64) -> Tensor<f64> {
    Tensor::from_f64(vec![1, 2], &[(pt / (1.0 - pt)).ln(), 0.0]).unwrap()
}

fn dafl_value(pt: f64, c: f64, gamma: f64) -> f64 {
    let mut t = Tape::new();
    let z = t.constant(logits_for(pt));
    let l = dafl(&mut t, z, &[0], &[c], Gamma::Fixed(gamma)).unwrap();
    t.value(l).data()[0]
}

#[test]
fn hand_values() {
    assert!((dafl_value(0.5, 1.0, 2.0) - 2.0 * 0.25 * 2f64.ln()).abs() < 1e-15);
    let mut t = Tape::new();
    let z = t.constant(logits_for(0.5));
    let f = focal(&mut t, z, &[0], Gamma::Fixed(2.0)).unwrap();
    assert!((t.value(f).data()[0] - 0.25 * 2f64.ln()).abs() < 1e-15);
    let ratio = dafl_value(0.9, 0.0, 2.0) / dafl_value(0.5, 0.0, 2.0);
    assert!((ratio - 0.01 * (0.9f64).ln() / (0.25 * 0.5f64.ln())).abs() < 1e-12);
}

#[test]
fn per_sample_ratio_follows_coefficient() {
    // equal p_t, coefficients [0, 41.6193]: the sample losses differ by 42.6193
    let single = |c: f64| -> f64 {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_f64(vec![1, 3], &[0.1, 0.7, -0.4]).unwrap());
        let l = dafl(&mut t, v, &[1], &[c], Gamma::Fixed(2.0)).unwrap();
        t.value(l).data()[0]
    };
    assert!((single(41.6193) / single(0.0) - 42.6193).abs() < 1e-12);
}

#[test]
fn ce_logit_gradient_matches_finite_differences() {
    let z0 = [0.3, -1.0, 2.0, 0.5, 0.0, -0.7];
    let labels = [2, 0];
    let loss = |z: &[f64]| {
        let mut t = Tape::new();
        let v = t.param(Tensor::from_f64(vec![2, 3], z).unwrap());
        let l = cross_entropy(&mut t, v, &labels).unwrap();
        (t, v, l)
    };
    let (mut t, v, l) = loss(&z0);
    t.backward(l).unwrap();
    let g = t.grad(v).unwrap().to_vec();
    let mut f = |z: &[f64]| {
        let (t, _, l) = loss(z);
        t.value(l).data()[0]
    };
    let fd = central_diff(&mut f, &z0, &[0, 1, 2, 3, 4, 5], 1e-6);
    for (a, d) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *d, 1e-3) < 1e-6);
    }
}

#[test]
fn trained_gamma_stays_within_bounds() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.precision = Precision::F64;
    cfg.loss.kind = LossKind::Dafl;
    cfg.loss.gamma_trainable = true;
    cfg.loss.gamma = 4.9;
    cfg.federation.rounds = 5;
    cfg.federation.learning_rate = 5e-2;
    let p = plan(&cfg).unwrap();
    let out = train_plan::<f64>(&cfg, &p).unwrap();
    let g = out.params.get(GAMMA_PARAM).unwrap().data()[0];
    assert!((0.5..=5.0).contains(&g), "{g}");
    // the exponent gradient is negative, so training pushes it to the upper bound
    assert_eq!(g, 5.0);
    assert!(out.records.iter().all(|r| r.gamma <= 5.0));
}

proptest! {
    #[test]
    fn loss_is_nonnegative(
        z in prop::collection::vec(-40.0f64..40.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
        c in prop::collection::vec(0.0f64..100.0, 3),
        gamma in 0.0f64..5.0,
    ) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_f64(vec![3, 4], &z).unwrap());
        let l = dafl(&mut t, v, &labels, &c, Gamma::Fixed(gamma)).unwrap();
        prop_assert!(t.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn loss_decreases_in_target_probability(
        p in 0.01f64..0.98,
        dp in 0.005f64..0.01,
        c in 0.0f64..50.0,
        gamma in 0.0f64..5.0,
    ) {
        prop_assert!(dafl_value(p + dp, c, gamma) < dafl_value(p, c, gamma));
    }

    #[test]
    fn gamma_gradient_is_negative(p in 0.01f64..0.99, c in 0.0f64..50.0, gamma in 0.5f64..5.0) {
        let mut t = Tape::new();
        let z = t.constant(logits_for(p));
        let g = t.param(Tensor::scalar(gamma));
        let l = dafl(&mut t, z, &[0], &[c], Gamma::Trainable(g)).unwrap();
        t.backward(l).unwrap();
        let dg = t.grad(g).unwrap()[0];
        prop_assert!(dg < 0.0);
        let want = -(1.0 + c) * (1.0 - p).powf(gamma) * (1.0 - p).ln() * p.ln();
        prop_assert!((dg - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}
