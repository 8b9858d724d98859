use fedimb::imbalance::HeadTailSplit;
use fedimb::losses::{logit_gradients, LossConfig, LossKind};
use fedimb::metrics::{
    auc_binary, auc_ovr, decision_curve, default_thresholds, l2, roc_points, ConfusionMatrix, GradNormTracker,
    MetricReport,
};
use fedimb::rollout::{attention_rollout, LayerAttention};
use fedimb::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

#[test]
fn ovr_auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let n = rng.random_range(3..=10);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64 + 0.5).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let rep = auc_ovr(&probs, &labels, 3).unwrap();
        let mut defined = Vec::new();
        for k in 0..3 {
            let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            let has_both = pos.iter().any(|&p| p) && pos.iter().any(|&p| !p);
            match rep.per_class[k] {
                Some(a) => {
                    assert!(has_both);
                    let want = pair_auc(&s, &pos);
                    assert!((a - want).abs() <= 1e-12);
                    defined.push(want);
                }
                None => assert!(!has_both),
            }
        }
        if !defined.is_empty() {
            let want = defined.iter().sum::<f64>() / defined.len() as f64;
            assert!((rep.macro_auc.unwrap() - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn auc_limits() {
    assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
    assert_eq!(auc_binary(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
    assert_eq!(auc_binary(&[0.1, 0.2], &[true, true]), None);
}

#[test]
fn roc_runs_corner_to_corner_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let pts = roc_points(&s, &pos);
        assert_eq!(pts[0], (0.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }
}

#[test]
fn accuracy_from_trace_equals_direct_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..200);
        let c = rng.random_range(2..7);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, c).unwrap();
        let direct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
        assert_eq!(cm.trace() as f64 / cm.total() as f64, direct);
        assert_eq!(cm.accuracy(), direct);
    }
}

#[test]
fn undefined_ratios_are_flagged() {
    // class 2 never occurs and is never predicted
    let logits = Tensor::<f64>::from_f64(vec![2, 3], &[2.0, 0.0, -1.0, 0.0, 2.0, -1.0]).unwrap();
    let rep = MetricReport::from_logits(&logits, &[0, 1]).unwrap();
    assert_eq!(rep.accuracy, 1.0);
    assert_eq!(rep.per_class[2].precision, 0.0);
    assert!(rep.flags.iter().any(|f| f.contains("class 2")));
    assert!(rep.flags.iter().any(|f| f.contains("AUC undefined")));
}

#[test]
fn decision_curve_cases() {
    let thr = default_thresholds();
    assert_eq!(thr.len(), 19);
    let rows = decision_curve(&[0.0; 5], &[true, false, true, false, true], &thr).unwrap();
    assert!(rows.iter().all(|r| r.net_benefit == 0.0));

    // 50 positives and 10 negatives above 0.5, 40 negatives below
    let mut s = vec![0.9; 60];
    s.extend(vec![0.1; 40]);
    let pos: Vec<bool> = (0..100).map(|i| i < 50).collect();
    let r = decision_curve(&s, &pos, &[0.5]).unwrap();
    assert!((r[0].net_benefit - 0.4).abs() < 1e-15);

    // treat-all limit
    let prevalence = 0.5;
    let r = decision_curve(&s, &pos, &[1e-9]).unwrap();
    assert!((r[0].net_benefit - prevalence).abs() < 1e-8);

    assert!(matches!(decision_curve(&s, &pos, &[1.0]), Err(e) if e.is_config()));
    assert!(matches!(decision_curve(&s, &pos, &[0.0]), Err(Error::Config(_))));
}

#[test]
fn dafl_norm_ratio_is_one_plus_c() {
    let cfg = LossConfig {
        kind: LossKind::Dafl,
        ..LossConfig::default()
    };
    let split = HeadTailSplit {
        tail: vec![1],
        head: vec![0],
    };
    for c in [0.0, 0.5, 3.0, 41.6193, 102.4706] {
        let z = Tensor::<f64>::from_f64(vec![2, 3], &[0.3, -1.2, 0.8, 0.3, -1.2, 0.8]).unwrap();
        let g = logit_gradients(&cfg, &z, &[2, 2], Some(&[c, 0.0]), 2.0).unwrap();
        let mut t = GradNormTracker::default();
        t.record(&split, 1, l2(&g[0]));
        t.record(&split, 0, l2(&g[1]));
        let n = t.finish();
        let ratio = n.tail.unwrap() / n.head.unwrap();
        assert!((ratio - (1.0 + c)).abs() <= 1e-12 * (1.0 + c), "{c}: {ratio}");
    }
}

#[test]
fn ce_uniform_logits_share_one_norm() {
    let cfg = LossConfig {
        kind: LossKind::Ce,
        ..LossConfig::default()
    };
    let classes = 5;
    let z = Tensor::<f64>::zeros(&[4, classes]);
    let labels = [0, 1, 3, 4];
    let g = logit_gradients(&cfg, &z, &labels, None, 2.0).unwrap();
    let want = ((classes as f64 - 1.0) / classes as f64).sqrt();
    let split = HeadTailSplit {
        tail: vec![3, 4],
        head: vec![0, 1, 2],
    };
    let mut t = GradNormTracker::default();
    t.record_batch(&split, &labels, &g);
    let n = t.finish();
    for row in &g {
        assert!((l2(row) - want).abs() < 1e-15);
    }
    assert!((n.tail.unwrap() - n.head.unwrap()).abs() < 1e-15);
}

#[test]
fn rollout_identity_attention_is_flat() {
    let n = 5;
    let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let layer = LayerAttention {
        maps: vec![eye],
        grads: vec![vec![1.0; n * n]],
        tokens: n,
    };
    let m = attention_rollout(&[layer]).unwrap();
    assert_eq!(m, vec![0.0; n - 1]);
}

proptest! {
    #[test]
    fn rollout_mask_is_unit_scaled(seed in any::<u64>(), layers in 1usize..4, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let stack: Vec<LayerAttention> = (0..layers)
            .map(|_| LayerAttention {
                maps: (0..heads).map(|_| (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
                grads: (0..heads).map(|_| (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                tokens: n,
            })
            .collect();
        let m = attention_rollout(&stack).unwrap();
        prop_assert_eq!(m.len(), n - 1);
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
