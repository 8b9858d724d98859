//! Class-count statistics shared by clients and server: client-level
//! imbalance, global per-class imbalance, the per-sample blend of the two,
//! and the head/tail imbalance score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Per-class sample counts for one client (or a pool).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for l in labels {
            *counts.get_mut(l).ok_or(Error::Index {
                context: "class label",
                index: l,
                limit: num_classes,
            })? += 1;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Element-wise sum of histograms over the same classes.
    pub fn merge(hists: &[ClassHistogram]) -> Result<Self> {
        let c = hists
            .first()
            .ok_or_else(|| Error::contract("merge of zero histograms"))?
            .num_classes();
        let mut counts = vec![0u64; c];
        for h in hists {
            if h.num_classes() != c {
                return Err(Error::contract(format!(
                    "histogram class counts differ: {c} vs {}",
                    h.num_classes()
                )));
            }
            counts.iter_mut().zip(&h.counts).for_each(|(a, b)| *a += b);
        }
        Ok(Self { counts })
    }
}

/// Statistics exchanged between clients and server for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub client_coeffs: Vec<f64>,
    pub class_coeffs: Vec<f64>,
    pub epsilon: f64,
    pub lambda: f64,
}

impl ImbalanceReport {
    pub fn compute(hists: &[ClassHistogram], epsilon: f64, lambda: f64) -> Result<Self> {
        let client_coeffs = hists
            .iter()
            .map(|h| client_imbalance(h, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let class_coeffs = global_class_imbalance(hists, epsilon)?;
        Ok(Self {
            client_coeffs,
            class_coeffs,
            epsilon,
            lambda,
        })
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::config(format!("epsilon must be a positive finite number, got {eps}")));
    }
    Ok(())
}

/// Mean over all classes of `(N_k - n_ki) / (n_ki + eps)`.
///
/// Classes absent from the client stay in the mean and contribute
/// `N_k / eps`.
pub fn client_imbalance(h: &ClassHistogram, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    client_imbalance_raw(h, eps)
}

/// Same as [`client_imbalance`] but accepts `eps == 0` for exact
/// hand-evaluation of fully populated histograms.
pub fn client_imbalance_raw(h: &ClassHistogram, eps: f64) -> Result<f64> {
    let c = h.num_classes();
    if c == 0 {
        return Err(Error::contract("client_imbalance on empty histogram"));
    }
    let total = h.total() as f64;
    let mut acc = 0.0;
    for &n in h.counts() {
        let n = n as f64;
        acc += (total - n) / (n + eps);
    }
    Ok(acc / c as f64)
}

/// Per-class `(sum_k N_k - sum_k n_ki) / (sum_k n_ki + eps)` over pooled counts.
pub fn global_class_imbalance(hists: &[ClassHistogram], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    global_class_imbalance_raw(hists, eps)
}

pub fn global_class_imbalance_raw(hists: &[ClassHistogram], eps: f64) -> Result<Vec<f64>> {
    let pooled = ClassHistogram::merge(hists)?;
    let total = pooled.total() as f64;
    Ok(pooled
        .counts()
        .iter()
        .map(|&n| (total - n as f64) / (n as f64 + eps))
        .collect())
}

/// `lambda * c_k + (1 - lambda) * class_coeffs[t]`.
pub fn dynamic_coefficient(client_coeff: f64, class_coeffs: &[f64], true_class: usize, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let cf = *class_coeffs.get(true_class).ok_or(Error::Index {
        context: "dynamic_coefficient true class",
        index: true_class,
        limit: class_coeffs.len(),
    })?;
    Ok(lambda * client_coeff + (1.0 - lambda) * cf)
}

/// `(N - n) / n`; larger means rarer.
pub fn imbalance_score(total: u64, count: u64) -> Result<f64> {
    if count == 0 {
        return Err(Error::contract("imbalance_score undefined for a class with zero samples"));
    }
    if count > total {
        return Err(Error::contract(format!("class count {count} exceeds total {total}")));
    }
    Ok((total - count) as f64 / count as f64)
}

/// Scores for every class of a pooled histogram.
pub fn imbalance_scores(pool: &ClassHistogram) -> Result<Vec<f64>> {
    let total = pool.total();
    pool.counts().iter().map(|&n| imbalance_score(total, n)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTailSplit {
    pub tail: Vec<usize>,
    pub head: Vec<usize>,
}

impl HeadTailSplit {
    pub fn is_tail(&self, class: usize) -> bool {
        self.tail.contains(&class)
    }
}

/// The `round(tail_fraction * C)` classes with the highest score form the
/// tail; equal scores are ranked by ascending class index. Both returned
/// sets are sorted by class index.
pub fn head_tail_split(scores: &[f64], tail_fraction: f64) -> Result<HeadTailSplit> {
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(Error::config(format!("tail_fraction must lie in (0, 1), got {tail_fraction}")));
    }
    let c = scores.len();
    let k = ((tail_fraction * c as f64).round() as usize).min(c);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tail: Vec<usize> = order[..k].to_vec();
    let mut head: Vec<usize> = order[k..].to_vec();
    tail.sort_unstable();
    head.sort_unstable();
    Ok(HeadTailSplit { tail, head })
}
