//! Label-skew partitioning of a labeled pool into client shards and a
//! global test set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::ClassHistogram;

const RATIO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Fixed,
    Dirichlet,
}

/// Where the global test set comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSplit {
    /// The last entry of a fixed ratio vector is the test share.
    LastRatio,
    /// A stratified `test_fraction` holdout is drawn before partitioning.
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub ratios: Vec<f64>,
    pub beta: f64,
    pub num_clients: usize,
    pub test_split: TestSplit,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Fixed,
            ratios: vec![0.4, 0.3, 0.2, 0.1],
            beta: 0.5,
            num_clients: 3,
            test_split: TestSplit::LastRatio,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        match self.mode {
            PartitionMode::Fixed => {
                validate_ratios(&self.ratios)?;
                if self.test_split == TestSplit::LastRatio && self.ratios.len() < 2 {
                    return Err(Error::config("test_split = last-ratio needs at least two ratios"));
                }
            }
            PartitionMode::Dirichlet => {
                if !(self.beta > 0.0) || !self.beta.is_finite() {
                    return Err(Error::config(format!("beta must be finite and > 0, got {}", self.beta)));
                }
                if self.num_clients == 0 {
                    return Err(Error::config("num_clients must be >= 1"));
                }
                if self.test_split == TestSplit::LastRatio {
                    return Err(Error::config("dirichlet partitioning requires test_split = holdout"));
                }
            }
        }
        Ok(())
    }

    /// Number of client shards this spec produces.
    pub fn clients(&self) -> usize {
        match (self.mode, self.test_split) {
            (PartitionMode::Fixed, TestSplit::LastRatio) => self.ratios.len() - 1,
            (PartitionMode::Fixed, TestSplit::Holdout) => self.ratios.len(),
            (PartitionMode::Dirichlet, _) => self.num_clients,
        }
    }
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::config("ratio vector is empty"));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::config(format!("ratios must be finite and >= 0, got {r}")));
    }
    let s: f64 = ratios.iter().sum();
    if (s - 1.0).abs() > RATIO_TOL {
        return Err(Error::config(format!("ratios must sum to 1, got {s}")));
    }
    Ok(())
}

/// Scales a nonnegative vector to sum to one.
pub fn normalize_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || !(s > 0.0) || !s.is_finite() {
        return Err(Error::config(format!("cannot normalize ratios {ratios:?}")));
    }
    Ok(ratios.iter().map(|r| r / s).collect())
}

/// Integer apportionment of `total` by `ratios`: floor shares, then the
/// leftover units one by one in descending fractional part (ties to the
/// lower index).
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|q| q * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    // more than one pass only happens when the ratios fall short of 1
    while left > 0 && !order.is_empty() {
        for &j in &order {
            if left == 0 {
                break;
            }
            out[j] += 1;
            left -= 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub clients: Vec<Vec<usize>>,
    pub test: Vec<usize>,
    pub histograms: Vec<ClassHistogram>,
    pub warnings: Vec<String>,
}

impl PartitionResult {
    pub fn client_totals(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// `index<TAB>client-j|test`, one line per sample in index order.
    pub fn manifest(&self) -> String {
        let n = self.clients.iter().map(Vec::len).sum::<usize>() + self.test.len();
        let mut owner = vec![String::new(); n];
        for (j, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                owner[i] = format!("client-{j}");
            }
        }
        for &i in &self.test {
            owner[i] = "test".into();
        }
        let mut out = String::new();
        for (i, o) in owner.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{o}");
        }
        out
    }
}

fn class_indices(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(Error::Index {
                context: "partition label",
                index: l,
                limit: num_classes,
            })?
            .push(i);
    }
    Ok(by_class)
}

/// Splits each class's shuffled indices into `ratios_for(c).len()` buckets.
fn allocate(
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
    mut ratios_for: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>,
    buckets: usize,
) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    let by_class = class_indices(labels, num_classes)?;
    let mut out = vec![Vec::new(); buckets];
    let mut warnings = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            warnings.push(format!("class {c} has no samples"));
            continue;
        }
        idx.shuffle(rng);
        let q = ratios_for(c, rng);
        let sizes = largest_remainder(idx.len(), &q);
        if sizes.contains(&0) {
            warnings.push(format!(
                "class {c}: {} samples leave {} bucket(s) empty",
                idx.len(),
                sizes.iter().filter(|&&s| s == 0).count()
            ));
        }
        let mut at = 0;
        for (b, s) in sizes.into_iter().enumerate() {
            out[b].extend_from_slice(&idx[at..at + s]);
            at += s;
        }
    }
    for b in &mut out {
        b.sort_unstable();
    }
    Ok((out, warnings))
}

fn histograms(labels: &[usize], clients: &[Vec<usize>], num_classes: usize) -> Result<Vec<ClassHistogram>> {
    clients
        .iter()
        .map(|idx| ClassHistogram::from_labels(idx.iter().map(|&i| labels[i]), num_classes))
        .collect()
}

/// Fixed-ratio split of every class into `ratios.len()` buckets.
pub fn split_fixed(labels: &[usize], num_classes: usize, ratios: &[f64], seed: u64) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    validate_ratios(ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    allocate(labels, num_classes, &mut rng, |_, _| ratios.to_vec(), ratios.len())
}

/// Fixed-ratio partition with no test set: every bucket is a client.
pub fn partition_fixed(labels: &[usize], num_classes: usize, ratios: &[f64], seed: u64) -> Result<PartitionResult> {
    let (clients, warnings) = split_fixed(labels, num_classes, ratios, seed)?;
    Ok(PartitionResult {
        histograms: histograms(labels, &clients, num_classes)?,
        clients,
        test: Vec::new(),
        warnings,
    })
}

/// One Dirichlet(beta·1_M) draw via normalized Gamma(beta, 1) variates.
pub fn dirichlet(beta: f64, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(beta > 0.0) || m == 0 {
        return Err(Error::config(format!("dirichlet needs beta > 0 and M >= 1, got {beta}, {m}")));
    }
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let g = Gamma::new(beta, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let draws: Vec<f64> = (0..m).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        return Ok(draws.into_iter().map(|x| x / s).collect());
    }
    // every variate underflowed: the draw is a vertex of the simplex
    let k = draws
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((0..m).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
}

pub fn partition_dirichlet(labels: &[usize], num_classes: usize, beta: f64, m: usize, seed: u64) -> Result<PartitionResult> {
    dirichlet(beta, m, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clients, warnings) = allocate(
        labels,
        num_classes,
        &mut rng,
        |_, r| dirichlet(beta, m, r).expect("validated above"),
        m,
    )?;
    Ok(PartitionResult {
        histograms: histograms(labels, &clients, num_classes)?,
        clients,
        test: Vec::new(),
        warnings,
    })
}

/// Stratified holdout: `fraction` of each class (largest-remainder rounded).
pub fn holdout_test(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let (mut parts, _) = split_fixed(labels, num_classes, &[1.0 - fraction, fraction], seed)?;
    Ok(parts.pop().expect("two buckets"))
}

/// Full partition per `spec`. Client shards and the test set are disjoint
/// and together cover `0..labels.len()`.
pub fn partition(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<PartitionResult> {
    spec.validate()?;
    if spec.test_split == TestSplit::LastRatio {
        let (mut buckets, warnings) = split_fixed(labels, num_classes, &spec.ratios, spec.seed)?;
        let test = buckets.pop().expect("validated: >= 2 ratios");
        return Ok(PartitionResult {
            histograms: histograms(labels, &buckets, num_classes)?,
            clients: buckets,
            test,
            warnings,
        });
    }
    let test = holdout_test(labels, num_classes, spec.test_fraction, spec.seed)?;
    let mut is_test = vec![false; labels.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    let pool: Vec<usize> = (0..labels.len()).filter(|&i| !is_test[i]).collect();
    let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
    // a distinct stream so the holdout and the client split are independent
    let seed = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
    let sub = match spec.mode {
        PartitionMode::Fixed => partition_fixed(&pool_labels, num_classes, &spec.ratios, seed)?,
        PartitionMode::Dirichlet => partition_dirichlet(&pool_labels, num_classes, spec.beta, spec.num_clients, seed)?,
    };
    let clients: Vec<Vec<usize>> = sub
        .clients
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| pool[i]).collect())
        .collect();
    Ok(PartitionResult {
        histograms: sub.histograms,
        clients,
        test,
        warnings: sub.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(largest_remainder(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.4, 0.3, 0.2, 0.1]), vec![3, 2, 1, 1]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn single_ratio_takes_everything() {
        let l = labels(&[5, 3, 1]);
        let p = partition_fixed(&l, 3, &[1.0], 4).unwrap();
        assert_eq!(p.clients[0], (0..9).collect::<Vec<_>>());
        assert_eq!(p.histograms[0].counts(), &[5, 3, 1]);
    }

    #[test]
    fn exact_halves() {
        let l = labels(&[10, 10]);
        let p = partition_fixed(&l, 2, &[0.5, 0.5], 1).unwrap();
        for h in &p.histograms {
            assert_eq!(h.counts(), &[5, 5]);
        }
    }

    #[test]
    fn dirichlet_single_client_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for beta in [1e-3, 0.5, 10.0] {
            assert_eq!(dirichlet(beta, 1, &mut rng).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn holdout_one_class() {
        let l = vec![0; 100];
        assert_eq!(holdout_test(&l, 1, 0.1, 0).unwrap().len(), 10);
    }

    #[test]
    fn manifest_lines() {
        let l = labels(&[4, 4]);
        let spec = PartitionSpec {
            ratios: vec![0.5, 0.25, 0.25],
            ..Default::default()
        };
        let p = partition(&l, 2, &spec).unwrap();
        let m = p.manifest();
        assert_eq!(m.lines().count(), 8);
        assert_eq!(m.lines().filter(|s| s.ends_with("\ttest")).count(), 2);
        assert!(m.starts_with("0\t"));
    }

    #[test]
    fn invalid_ratios() {
        assert!(validate_ratios(&[0.333, 0.333, 0.333]).unwrap_err().is_config());
        assert!(validate_ratios(&[1.5, -0.5]).is_err());
        let n = normalize_ratios(&[0.333, 0.333, 0.333]).unwrap();
        validate_ratios(&n).unwrap();
    }
}
