//! Classification metrics, one-vs-rest ROC/AUC, decision-curve net
//! benefit and per-group gradient-norm tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::HeadTailSplit;
use crate::tensor::{Scalar, Tensor};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax in f64 (max-subtracted).
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    /// Row-major; rows are true classes, columns predictions.
    grid: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut grid = vec![0u64; classes * classes];
        for (&p, &t) in preds.iter().zip(labels) {
            for (v, ctx) in [(p, "predicted class"), (t, "true class")] {
                if v >= classes {
                    return Err(Error::Index {
                        context: ctx,
                        index: v,
                        limit: classes,
                    });
                }
            }
            grid[t * classes + p] += 1;
        }
        Ok(Self { classes, grid })
    }

    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let c = logits.shape()[1];
        let preds: Vec<usize> = logits.data().chunks(c).map(argmax).collect();
        Self::from_predictions(&preds, labels, c)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.grid[truth * self.classes + pred]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.grid.chunks(self.classes)
    }

    pub fn total(&self) -> u64 {
        self.grid.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Macro one-vs-rest AUC over classes where it is defined.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Conventions applied (undefined ratios scored 0, excluded classes).
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64, what: &str, class: usize, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("class {class}: {what} undefined, scored 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class one-vs-rest counts and macro averages. AUC is left unset;
/// see [`MetricReport::with_auc`].
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let c = cm.classes();
    let n = cm.total();
    if c == 0 || n == 0 {
        return Err(Error::contract("metrics of an empty confusion matrix"));
    }
    let mut flags = Vec::new();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let support: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = n - tp - fp - fn_;
        if support == 0 {
            flags.push(format!("class {k}: zero support"));
        }
        let precision = ratio(tp, tp + fp, "precision", k, &mut flags);
        let recall = ratio(tp, tp + fn_, "recall", k, &mut flags);
        let specificity = ratio(tn, tn + fp, "specificity", k, &mut flags);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            support,
            precision,
            recall,
            f1,
            specificity,
            auc: None,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(MetricReport {
        accuracy: cm.accuracy(),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        specificity: mean(|m| m.specificity),
        auc: None,
        per_class,
        flags,
    })
}

impl MetricReport {
    pub fn with_auc(mut self, auc: &AucReport) -> Self {
        for (m, a) in self.per_class.iter_mut().zip(&auc.per_class) {
            m.auc = *a;
        }
        self.auc = auc.macro_auc;
        self.flags.extend(auc.flags.iter().cloned());
        self
    }

    /// Metrics for a batch of logits: confusion, macro scores and AUC.
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let cm = ConfusionMatrix::from_logits(logits, labels)?;
        let auc = auc_ovr(&softmax_rows(logits), labels, cm.classes())?;
        Ok(classification_metrics(&cm)?.with_auc(&auc))
    }
}

/// Rank-based AUC with mid-ranks for ties. `None` when either class is
/// absent.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// ROC points `(fpr, tpr)` from the highest threshold down: starts at
/// `(0, 0)`, ends at `(1, 1)`, one point per distinct score.
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let fpr = if n_neg > 0.0 { fp / n_neg } else { 0.0 };
        let tpr = if n_pos > 0.0 { tp / n_pos } else { 0.0 };
        pts.push((fpr, tpr));
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub roc: Vec<Vec<(f64, f64)>>,
    pub flags: Vec<String>,
}

/// One-vs-rest AUC per class on probability scores `[B][C]`.
pub fn auc_ovr(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<AucReport> {
    if probs.len() != labels.len() {
        return Err(Error::contract(format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut roc = Vec::with_capacity(classes);
    let mut flags = Vec::new();
    for k in 0..classes {
        let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let a = auc_binary(&s, &pos);
        if a.is_none() {
            flags.push(format!("class {k}: AUC undefined (no positives or no negatives), excluded"));
        }
        per_class.push(a);
        roc.push(roc_points(&s, &pos));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport {
        macro_auc,
        per_class,
        roc,
        flags,
    })
}

/// `tp/n - fp/n * pt/(1 - pt)`.
pub fn net_benefit(tp: u64, fp: u64, n: u64, pt: f64) -> f64 {
    let n = n as f64;
    tp as f64 / n - fp as f64 / n * pt / (1.0 - pt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcaRow {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub n: u64,
    pub net_benefit: f64,
}

/// Net benefit of "positive when score >= pt" at each threshold.
pub fn decision_curve(scores: &[f64], positive: &[bool], thresholds: &[f64]) -> Result<Vec<DcaRow>> {
    if scores.len() != positive.len() || scores.is_empty() {
        return Err(Error::contract("decision_curve needs equal-length nonempty inputs"));
    }
    let n = scores.len() as u64;
    thresholds
        .iter()
        .map(|&pt| {
            if !(pt > 0.0 && pt < 1.0) {
                return Err(Error::config(format!("threshold must lie in (0, 1), got {pt}")));
            }
            let (mut tp, mut fp) = (0, 0);
            for (&s, &p) in scores.iter().zip(positive) {
                if s >= pt {
                    if p {
                        tp += 1
                    } else {
                        fp += 1
                    }
                }
            }
            Ok(DcaRow {
                threshold: pt,
                tp,
                fp,
                n,
                net_benefit: net_benefit(tp, fp, n, pt),
            })
        })
        .collect()
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Euclidean norm.
pub fn l2<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupNorms {
    pub tail: Option<f64>,
    pub head: Option<f64>,
}

/// Running per-group sums of per-sample logit-gradient norms.
#[derive(Clone, Debug, Default)]
pub struct GradNormTracker {
    tail: (f64, u64),
    head: (f64, u64),
}

impl GradNormTracker {
    pub fn record(&mut self, split: &HeadTailSplit, class: usize, norm: f64) {
        let slot = if split.is_tail(class) { &mut self.tail } else { &mut self.head };
        slot.0 += norm;
        slot.1 += 1;
    }

    pub fn record_batch<T: Scalar>(&mut self, split: &HeadTailSplit, labels: &[usize], grads: &[Vec<T>]) {
        for (&l, g) in labels.iter().zip(grads) {
            self.record(split, l, l2(g));
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.tail.0 += other.tail.0;
        self.tail.1 += other.tail.1;
        self.head.0 += other.head.0;
        self.head.1 += other.head.1;
    }

    /// Group means; empty groups are `None`.
    pub fn finish(&self) -> GroupNorms {
        let m = |(s, n): (f64, u64)| (n > 0).then(|| s / n as f64);
        GroupNorms {
            tail: m(self.tail),
            head: m(self.head),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn perfect_is_diagonal() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
    }

    #[test]
    fn all_class_zero_single_column() {
        let cm = ConfusionMatrix::from_predictions(&[0; 4], &[0, 1, 2, 1], 3).unwrap();
        for t in 0..3 {
            assert_eq!(cm.get(t, 1) + cm.get(t, 2), 0);
        }
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.flags.iter().any(|f| f.contains("class 1: precision undefined")));
    }

    #[test]
    fn binary_hand_arithmetic() {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (t, p, n) in [(0, 0, 40), (0, 1, 10), (1, 0, 20), (1, 1, 30)] {
            preds.extend(std::iter::repeat_n(p, n));
            labels.extend(std::iter::repeat_n(t, n));
        }
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 2).unwrap();
        let r = classification_metrics(&cm).unwrap();
        let c0 = &r.per_class[0];
        assert!((c0.precision - 40.0 / 60.0).abs() < 1e-15);
        assert_eq!(c0.recall, 0.8);
        assert_eq!(c0.specificity, 0.6);
        assert!((c0.f1 - 2.0 * (2.0 / 3.0) * 0.8 / (2.0 / 3.0 + 0.8)).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.7);
    }

    #[test]
    fn perfect_binary_all_ones() {
        let l: Vec<usize> = (0..100).map(|i| i / 50).collect();
        let r = classification_metrics(&ConfusionMatrix::from_predictions(&l, &l, 2).unwrap()).unwrap();
        for v in [r.accuracy, r.precision, r.recall, r.f1, r.specificity] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn length_mismatch_is_contract() {
        assert!(matches!(
            ConfusionMatrix::from_predictions(&[0], &[0, 1], 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn auc_extremes() {
        let pos = [true, true, false, false];
        assert_eq!(auc_binary(&[0.9, 0.8, 0.2, 0.1], &pos), Some(1.0));
        assert_eq!(auc_binary(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(auc_binary(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn roc_is_monotone() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4];
        let p = [false, false, true, true, true];
        let pts = roc_points(&s, &p);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn net_benefit_examples() {
        assert!((net_benefit(50, 10, 100, 0.5) - 0.4).abs() < 1e-15);
        let rows = decision_curve(&[0.0; 10], &[true; 10], &default_thresholds()).unwrap();
        assert!(rows.iter().all(|r| r.net_benefit == 0.0));
        assert_eq!(rows.len(), 19);
        assert!(decision_curve(&[0.5], &[true], &[1.0]).unwrap_err().is_config());
    }

    #[test]
    fn treat_all_limit_is_prevalence() {
        // everyone positive at a tiny threshold
        let pos = [true, false, false, true, false];
        let rows = decision_curve(&[0.5; 5], &pos, &[1e-9]).unwrap();
        assert!((rows[0].net_benefit - 0.4).abs() < 1e-8);
    }

    #[test]
    fn tracker_groups() {
        let split = HeadTailSplit {
            tail: vec![1],
            head: vec![0],
        };
        let mut t = GradNormTracker::default();
        t.record_batch(&split, &[0, 1, 1], &[vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(t.finish(), GroupNorms { tail: Some(2.0), head: Some(5.0) });
        assert_eq!(GradNormTracker::default().finish(), GroupNorms::default());
    }
}
