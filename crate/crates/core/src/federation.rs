//! Server/client round loop: broadcast, local Adam training, statistics
//! exchange, imbalance-weighted aggregation and global evaluation.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imbalance::{client_imbalance, global_class_imbalance, ClassHistogram, HeadTailSplit};
use crate::losses::{self, sample_coefficients, Gamma, LossConfig, LossKind, GAMMA_PARAM};
use crate::metrics::{GradNormTracker, GroupNorms, MetricReport};
use crate::model::{Bound, ModelParams, ModelSpec};
use crate::optim::{Adam, AdamConfig};
use crate::partition::holdout_test;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `ω_k ∝ 1 / (c_k + ε)`.
    DaflWeighted,
    /// `ω_k ∝ N_k` (classic FedAvg).
    SampleWeighted,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub client_fraction: f64,
    pub aggregation: Aggregation,
    /// Guard in the aggregation weights `1 / (c_k + epsilon)`.
    pub epsilon: f64,
    pub seed: u64,
    /// Train the clients of a round concurrently.
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            client_fraction: 1.0,
            aggregation: Aggregation::DaflWeighted,
            epsilon: 1e-6,
            seed: 0,
            parallel: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("rounds, local_epochs and batch_size must be >= 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config(format!("client_fraction must lie in (0, 1], got {}", self.client_fraction)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("aggregation epsilon must be > 0, got {}", self.epsilon)));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `master ⊕ hash(client, round)`.
pub fn derive_seed(master: u64, client: u64, round: u64) -> u64 {
    master ^ splitmix64(splitmix64(client) ^ round)
}

/// Client id used for server-side streams (client selection).
pub const SERVER_STREAM: u64 = u64::MAX;

/// Flat feature buffer plus labels, shared read-only by every client.
#[derive(Clone, Copy, Debug)]
pub struct DataView<'a, T> {
    pub features: &'a [T],
    pub labels: &'a [usize],
    pub sample_len: usize,
}

impl<'a, T: Scalar> DataView<'a, T> {
    pub fn new(features: &'a [T], labels: &'a [usize], sample_len: usize) -> Result<Self> {
        if features.len() != labels.len() * sample_len {
            return Err(Error::Shape {
                op: "data view",
                lhs: vec![labels.len(), sample_len],
                rhs: vec![features.len()],
            });
        }
        Ok(Self {
            features,
            labels,
            sample_len,
        })
    }

    pub fn sample(&self, i: usize) -> &'a [T] {
        &self.features[i * self.sample_len..(i + 1) * self.sample_len]
    }

    pub fn histogram(&self, idx: &[usize], classes: usize) -> Result<ClassHistogram> {
        ClassHistogram::from_labels(idx.iter().map(|&i| self.labels[i]), classes)
    }
}

/// Everything a client or the server needs besides parameters.
#[derive(Clone, Copy, Debug)]
pub struct Trainer<'a, T> {
    pub model: &'a ModelSpec,
    pub loss: &'a LossConfig,
    pub fed: &'a FederationConfig,
    pub data: DataView<'a, T>,
    /// Head/tail grouping for gradient-norm tracking.
    pub split: &'a HeadTailSplit,
}

/// Model parameters plus `loss.gamma` when the exponent is trainable.
pub fn init_params<T: Scalar>(model: &ModelSpec, loss: &LossConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut p = model.init::<T>(seed)?;
    if loss.uses_gamma_param() {
        p.push(GAMMA_PARAM, Tensor::scalar(T::of(loss.gamma)))?;
    }
    Ok(p)
}

/// The focusing exponent currently in effect.
pub fn gamma_value<T: Scalar>(params: &ModelParams<T>, loss: &LossConfig) -> f64 {
    match params.get(GAMMA_PARAM) {
        Some(t) if loss.uses_gamma_param() => t.data()[0].as_f64(),
        _ => loss.gamma,
    }
}

/// Result of one client's local update.
#[derive(Clone, Debug)]
pub struct LocalOutcome<T> {
    pub params: ModelParams<T>,
    pub client_coeff: f64,
    pub num_samples: usize,
    pub mean_loss: f64,
    pub grad_norms: GradNormTracker,
}

fn batch_loss<T: Scalar>(
    tr: &Trainer<'_, T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[usize],
    client_coeff: f64,
    class_coeffs: &[f64],
) -> Result<(crate::autodiff::Var, crate::autodiff::Var, Vec<usize>)> {
    let inputs: Vec<&[T]> = batch.iter().map(|&i| tr.data.sample(i)).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| tr.data.labels[i]).collect();
    let out = tr.model.forward(tape, bound, &inputs)?;
    let gamma = match bound.try_get(GAMMA_PARAM) {
        Some(v) if tr.loss.uses_gamma_param() => Gamma::Trainable(v),
        _ => Gamma::Fixed(T::of(tr.loss.gamma)),
    };
    let coeffs = match tr.loss.kind {
        LossKind::Dafl => Some(sample_coefficients(&labels, client_coeff, class_coeffs, tr.loss.lambda)?),
        _ => None,
    };
    let loss = losses::evaluate(tape, tr.loss, out.logits, &labels, coeffs.as_deref(), gamma)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric {
            op: "batch loss",
            index: 0,
            value: v.as_f64(),
        });
    }
    Ok((loss, out.logits, labels))
}

/// Mean loss over `idx` at fixed parameters (no update).
pub fn mean_loss<T: Scalar>(
    tr: &Trainer<'_, T>,
    params: &ModelParams<T>,
    idx: &[usize],
    client_coeff: f64,
    class_coeffs: &[f64],
) -> Result<f64> {
    let mut acc = 0.0;
    for batch in idx.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let (loss, _, _) = batch_loss(tr, &mut tape, &bound, batch, client_coeff, class_coeffs)?;
        acc += tape.value(loss).data()[0].as_f64() * batch.len() as f64;
    }
    Ok(acc / idx.len() as f64)
}

/// `E` epochs of mini-batch Adam on `shard`, starting from `global` with
/// fresh optimizer moments. The shard is reshuffled each epoch from `seed`.
pub fn local_train<T: Scalar>(
    tr: &Trainer<'_, T>,
    global: &ModelParams<T>,
    shard: &[usize],
    client_coeff: f64,
    class_coeffs: &[f64],
    seed: u64,
) -> Result<LocalOutcome<T>> {
    if shard.is_empty() {
        return Err(Error::contract("local_train on an empty shard"));
    }
    let mut params = global.clone();
    let mut opt = Adam::new(&params, tr.fed.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = shard.to_vec();
    let mut tracker = GradNormTracker::default();
    let (mut loss_sum, mut seen) = (0.0, 0usize);
    for _ in 0..tr.fed.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tr.fed.batch_size) {
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params, true);
            let (loss, logits, labels) = batch_loss(tr, &mut tape, &bound, batch, client_coeff, class_coeffs)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss).data()[0].as_f64() * batch.len() as f64;
            seen += batch.len();

            if let Some(g) = tape.grad(logits) {
                // undo the batch mean to get per-sample logit gradients
                let b = T::of(batch.len() as f64);
                let c = tr.model.num_classes();
                let rows: Vec<Vec<T>> = g.chunks(c).map(|r| r.iter().map(|&v| v * b).collect()).collect();
                tracker.record_batch(tr.split, &labels, &rows);
            }

            let grads: Vec<Option<Vec<T>>> = bound.vars().iter().map(|&v| tape.grad(v).map(<[T]>::to_vec)).collect();
            opt.step(&mut params, &grads)?;
            if tr.loss.uses_gamma_param() {
                if let Some(g) = params.get_mut(GAMMA_PARAM) {
                    let v = tr.loss.clamp_gamma(g.data()[0].as_f64());
                    g.data_mut()[0] = T::of(v);
                }
            }
        }
    }
    Ok(LocalOutcome {
        params,
        client_coeff,
        num_samples: shard.len(),
        mean_loss: loss_sum / seen as f64,
        grad_norms: tracker,
    })
}

/// `ω_k = w_k / Σ w` with `w_k = 1 / (c_k + eps)`.
pub fn aggregation_weights(client_coeffs: &[f64], eps: f64) -> Result<Vec<f64>> {
    if client_coeffs.is_empty() {
        return Err(Error::Aggregation("no client coefficients".into()));
    }
    if let Some(c) = client_coeffs.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::Aggregation(format!("client coefficient must be >= 0, got {c}")));
    }
    let w: Vec<f64> = client_coeffs.iter().map(|c| 1.0 / (c + eps)).collect();
    normalize(w)
}

fn normalize(w: Vec<f64>) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Aggregation(format!("weights {w:?} cannot be normalized")));
    }
    Ok(w.into_iter().map(|x| x / s).collect())
}

/// Weights for the configured rule.
pub fn weights_for(mode: Aggregation, client_coeffs: &[f64], sizes: &[usize], eps: f64) -> Result<Vec<f64>> {
    match mode {
        Aggregation::DaflWeighted => aggregation_weights(client_coeffs, eps),
        Aggregation::SampleWeighted => normalize(sizes.iter().map(|&n| n as f64).collect()),
        Aggregation::Uniform => normalize(vec![1.0; sizes.len()]),
    }
}

/// `Σ ω_k Θ_k`, evaluated as `Θ_1 + Σ_{k≥2} ω_k (Θ_k − Θ_1)` in client
/// order. The two agree for `Σ ω = 1`; the second returns `Θ` unchanged
/// when every client holds the same parameters.
pub fn aggregate<T: Scalar>(params: &[&ModelParams<T>], weights: &[f64]) -> Result<ModelParams<T>> {
    let first = *params
        .first()
        .ok_or_else(|| Error::Aggregation("no client parameters".into()))?;
    if params.len() != weights.len() {
        return Err(Error::Aggregation(format!("{} parameter sets for {} weights", params.len(), weights.len())));
    }
    for (k, p) in params.iter().enumerate().skip(1) {
        if let Some(m) = first.manifest_mismatch(p) {
            return Err(Error::Aggregation(format!("client {k} manifest differs at {m}")));
        }
    }
    let base = first.flatten();
    let mut acc = base.clone();
    for (p, &w) in params.iter().zip(weights).skip(1) {
        let w = T::of(w);
        for ((a, &x), &b0) in acc.iter_mut().zip(&p.flatten()).zip(&base) {
            *a = *a + w * (x - b0);
        }
    }
    let mut out = first.clone();
    out.unflatten(&acc)?;
    Ok(out)
}

/// Logits for `idx`, evaluated in fixed-size chunks.
pub fn predict_indices<T: Scalar>(
    model: &ModelSpec,
    params: &ModelParams<T>,
    data: &DataView<'_, T>,
    idx: &[usize],
) -> Result<Tensor<T>> {
    let mut all = Vec::with_capacity(idx.len() * model.num_classes());
    for chunk in idx.chunks(EVAL_BATCH) {
        let inputs: Vec<&[T]> = chunk.iter().map(|&i| data.sample(i)).collect();
        all.extend_from_slice(model.predict(params, &inputs)?.data());
    }
    Tensor::new(vec![idx.len(), model.num_classes()], all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub client_coeffs: Vec<f64>,
    pub client_sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub class_coeffs: Vec<f64>,
    pub metrics: MetricReport,
    pub grad_norms: GroupNorms,
    pub gamma: f64,
    pub train_loss: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome<T> {
    pub records: Vec<RoundRecord>,
    pub params: ModelParams<T>,
}

fn select_clients(fed: &FederationConfig, k: usize, round: usize) -> Vec<usize> {
    if fed.client_fraction >= 1.0 {
        return (0..k).collect();
    }
    let m = ((fed.client_fraction * k as f64).round() as usize).clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fed.seed, SERVER_STREAM, round as u64));
    let mut s = sample(&mut rng, k, m).into_vec();
    s.sort_unstable();
    s
}

/// Runs `T` rounds over `shards`, evaluating the global model on `eval`
/// after every aggregation. Client results are consumed in index order,
/// so serial and concurrent execution give identical records.
pub fn run_federation<T: Scalar>(
    tr: &Trainer<'_, T>,
    init: ModelParams<T>,
    shards: &[Vec<usize>],
    eval: &[usize],
) -> Result<FederationOutcome<T>> {
    tr.fed.validate()?;
    tr.loss.validate()?;
    if shards.is_empty() {
        return Err(Error::contract("federation needs at least one client"));
    }
    if eval.is_empty() {
        return Err(Error::contract("federation needs a nonempty evaluation set"));
    }
    let classes = tr.model.num_classes();
    let eval_labels: Vec<usize> = eval.iter().map(|&i| tr.data.labels[i]).collect();
    let hists = shards
        .iter()
        .map(|s| tr.data.histogram(s, classes))
        .collect::<Result<Vec<_>>>()?;
    // the class vector clients train against; refreshed by the server each round
    let mut class_coeffs = global_class_imbalance(&hists, tr.loss.epsilon)?;
    let mut global = init;
    let mut records = Vec::with_capacity(tr.fed.rounds);

    for round in 1..=tr.fed.rounds {
        let mut warnings = Vec::new();
        let candidates = select_clients(tr.fed, shards.len(), round);
        let selected: Vec<usize> = candidates
            .into_iter()
            .filter(|&k| {
                let empty = shards[k].is_empty();
                if empty {
                    warnings.push(format!("client {k} has an empty shard, skipped"));
                }
                !empty
            })
            .collect();
        if selected.is_empty() {
            return Err(Error::contract(format!("round {round}: no client with data")));
        }

        let train_one = |&k: &usize| -> Result<LocalOutcome<T>> {
            let c_k = client_imbalance(&hists[k], tr.loss.epsilon)?;
            local_train(
                tr,
                &global,
                &shards[k],
                c_k,
                &class_coeffs,
                derive_seed(tr.fed.seed, k as u64, round as u64),
            )
            .map_err(|e| Error::contract(format!("round {round}, client {k}: {e}")))
        };
        let outcomes: Vec<LocalOutcome<T>> = if tr.fed.parallel {
            selected.par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            selected.iter().map(train_one).collect::<Result<_>>()?
        };

        let round_hists: Vec<ClassHistogram> = selected.iter().map(|&k| hists[k].clone()).collect();
        class_coeffs = global_class_imbalance(&round_hists, tr.loss.epsilon)?;
        let client_coeffs: Vec<f64> = outcomes.iter().map(|o| o.client_coeff).collect();
        let sizes: Vec<usize> = outcomes.iter().map(|o| o.num_samples).collect();
        let weights = weights_for(tr.fed.aggregation, &client_coeffs, &sizes, tr.fed.epsilon)?;
        let refs: Vec<&ModelParams<T>> = outcomes.iter().map(|o| &o.params).collect();
        global = aggregate(&refs, &weights)?;

        let logits = predict_indices(tr.model, &global, &tr.data, eval)?;
        let metrics = MetricReport::from_logits(&logits, &eval_labels)?;
        let mut tracker = GradNormTracker::default();
        outcomes.iter().for_each(|o| tracker.merge(&o.grad_norms));
        let grad_norms = tracker.finish();
        if grad_norms.tail.is_none() {
            warnings.push("no tail-class samples seen this round".into());
        }
        let seen: usize = sizes.iter().sum();
        let train_loss = outcomes.iter().map(|o| o.mean_loss * o.num_samples as f64).sum::<f64>() / seen as f64;
        records.push(RoundRecord {
            round,
            selected,
            client_coeffs,
            client_sizes: sizes,
            weights,
            class_coeffs: class_coeffs.clone(),
            metrics,
            grad_norms,
            gamma: gamma_value(&global, tr.loss),
            train_loss,
            warnings,
        });
    }
    Ok(FederationOutcome { records, params: global })
}

/// Stratified 9:1 split of `pool` into (train, validation).
pub fn train_validation_split(labels: &[usize], pool: &[usize], classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let sub: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
    let val_local = holdout_test(&sub, classes, 0.1, seed)?;
    let mut is_val = vec![false; pool.len()];
    val_local.iter().for_each(|&i| is_val[i] = true);
    let train = (0..pool.len()).filter(|&i| !is_val[i]).map(|i| pool[i]).collect();
    let val = val_local.iter().map(|&i| pool[i]).collect();
    Ok((train, val))
}

/// Single-trainer baseline: the pool is split 9:1 into training and
/// validation data and trained as one client with uniform aggregation.
pub fn run_centralized<T: Scalar>(tr: &Trainer<'_, T>, init: ModelParams<T>, pool: &[usize]) -> Result<FederationOutcome<T>> {
    let (train, val) = train_validation_split(tr.data.labels, pool, tr.model.num_classes(), tr.fed.seed)?;
    let fed = FederationConfig {
        aggregation: Aggregation::Uniform,
        client_fraction: 1.0,
        ..tr.fed.clone()
    };
    let single = Trainer { fed: &fed, ..*tr };
    run_federation(&single, init, &[train], &val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> ModelParams<f64> {
        ModelParams::new(vec![("w".into(), Tensor::from_f64(vec![v.len()], v).unwrap())]).unwrap()
    }

    #[test]
    fn weight_examples() {
        let w = aggregation_weights(&[1.0, 1.0, 1.0], 1e-6).unwrap();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = aggregation_weights(&[1.0, 3.0], 1e-15).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        let w = aggregation_weights(&[0.0, 9.0], 1e-6).unwrap();
        let want = 1.0 - (1.0 / 9.000001) / (1e6 + 1.0 / 9.000001);
        assert!((w[0] - want).abs() < 1e-15);
        assert!((1.0 - w[0] - 1.11e-7).abs() < 1e-9);
    }

    #[test]
    fn aggregate_arithmetic() {
        let g = aggregate(&[&p(&[1.0, 2.0]), &p(&[3.0, 4.0])], &[0.75, 0.25]).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.5, 2.5]);
    }

    #[test]
    fn identical_clients_fixed_point() {
        let a = p(&[0.1, -7.3, 1e-9]);
        let g = aggregate(&[&a, &a, &a], &[0.2, 0.5, 0.3]).unwrap();
        assert_eq!(g, a);
    }

    #[test]
    fn manifest_mismatch_names_entry() {
        let a = p(&[1.0, 2.0]);
        let b = ModelParams::new(vec![("v".into(), Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap())]).unwrap();
        let e = aggregate(&[&a, &b], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(&e, Error::Aggregation(m) if m.contains("\"v\"")), "{e}");
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..3).flat_map(|k| (0..3).map(move |r| derive_seed(0, k, r))).collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(5, 1, 2) ^ derive_seed(0, 1, 2), 5);
    }

    #[test]
    fn client_selection() {
        let fed = FederationConfig {
            client_fraction: 0.5,
            ..Default::default()
        };
        let s = select_clients(&fed, 4, 3);
        assert_eq!(s.len(), 2);
        assert_eq!(s, select_clients(&fed, 4, 3));
        assert_eq!(select_clients(&FederationConfig::default(), 3, 1), vec![0, 1, 2]);
    }
}
