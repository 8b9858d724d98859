//! Cross-entropy, focal loss and the imbalance-weighted focal loss, all
//! recorded on a [`Tape`] and reduced by the arithmetic batch mean.
//!
//! The three share one evaluation path: `-log p_t` is formed first, the
//! focal factor multiplies it, and the per-sample weight `1 + c` multiplies
//! the result. With `gamma == 0` the focal factor is exactly `1`, and with
//! `c == 0` the weight is exactly `1`, so each loss reduces bit-for-bit to
//! the simpler one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imbalance::{dynamic_coefficient, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp applied to `p_t` before the log.
pub const P_MIN: f64 = 1e-12;

/// Name of the trainable focusing exponent inside model parameters.
pub const GAMMA_PARAM: &str = "loss.gamma";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
    Dafl,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Dafl => "dafl",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "focal" => Ok(LossKind::Focal),
            "dafl" => Ok(LossKind::Dafl),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub gamma_trainable: bool,
    pub gamma_bounds: [f64; 2],
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dafl,
            gamma: 2.0,
            gamma_trainable: false,
            gamma_bounds: [0.5, 5.0],
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.gamma_bounds;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::config(format!("gamma_bounds {:?} must satisfy 0 <= lo <= hi", self.gamma_bounds)));
        }
        if !(self.gamma >= lo && self.gamma <= hi) && self.kind != LossKind::Ce {
            return Err(Error::config(format!("gamma {} outside bounds {:?}", self.gamma, self.gamma_bounds)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn uses_gamma_param(&self) -> bool {
        self.gamma_trainable && self.kind != LossKind::Ce
    }

    /// Projects a trained exponent back onto `gamma_bounds`.
    pub fn clamp_gamma(&self, g: f64) -> f64 {
        g.clamp(self.gamma_bounds[0], self.gamma_bounds[1])
    }
}

/// Focusing exponent: a constant or a single-element tape variable.
#[derive(Clone, Copy, Debug)]
pub enum Gamma<T> {
    Fixed(T),
    Trainable(Var),
}

fn check_labels<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index {
            context: "loss label",
            index: bad,
            limit: c,
        });
    }
    Ok(c)
}

/// Returns `(p_t, -log(clamp(p_t)))`, both of shape `[B]`.
fn target_terms<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
    check_labels(tape, logits, labels)?;
    let probs = tape.softmax(logits, 1)?;
    let pt = tape.select_per_row(probs, labels)?;
    let clamped = tape.clamp(pt, T::of(P_MIN), T::one());
    let logp = tape.log(clamped)?;
    Ok((pt, tape.neg(logp)))
}

fn focal_terms<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], gamma: Gamma<T>) -> Result<Var> {
    let (pt, nll) = target_terms(tape, logits, labels)?;
    let q = tape.rsub_scalar(pt, T::one());
    let factor = match gamma {
        Gamma::Fixed(g) => {
            if g < T::zero() {
                return Err(Error::config(format!("gamma must be >= 0, got {g}")));
            }
            tape.pow_scalar(q, g)
        }
        Gamma::Trainable(v) => tape.pow_var(q, v)?,
    };
    tape.mul(factor, nll)
}

pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, nll) = target_terms(tape, logits, labels)?;
    Ok(tape.mean(nll))
}

pub fn focal<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], gamma: Gamma<T>) -> Result<Var> {
    let terms = focal_terms(tape, logits, labels, gamma)?;
    Ok(tape.mean(terms))
}

/// Batch mean of `-(1 + c) (1 - p_t)^gamma log p_t` with one
/// coefficient per sample.
pub fn dafl<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    coeffs: &[f64],
    gamma: Gamma<T>,
) -> Result<Var> {
    if coeffs.len() != labels.len() {
        return Err(Error::Shape {
            op: "dafl coefficients",
            lhs: vec![coeffs.len()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = coeffs.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
        return Err(Error::contract(format!("dafl coefficient must be finite and >= 0, got {bad}")));
    }
    let terms = focal_terms(tape, logits, labels, gamma)?;
    let weights = coeffs.iter().map(|&c| T::of(1.0 + c)).collect();
    let weighted = tape.mul_const(terms, weights)?;
    Ok(tape.mean(weighted))
}

/// Per-sample loss coefficients for one client.
pub fn sample_coefficients(labels: &[usize], client_coeff: f64, class_coeffs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&t| dynamic_coefficient(client_coeff, class_coeffs, t, lambda))
        .collect()
}

/// Dispatches on `cfg.kind`. `coeffs` is required for DAFL and ignored
/// otherwise.
pub fn evaluate<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &LossConfig,
    logits: Var,
    labels: &[usize],
    coeffs: Option<&[f64]>,
    gamma: Gamma<T>,
) -> Result<Var> {
    match cfg.kind {
        LossKind::Ce => cross_entropy(tape, logits, labels),
        LossKind::Focal => focal(tape, logits, labels, gamma),
        LossKind::Dafl => {
            let c = coeffs.ok_or_else(|| Error::contract("dafl loss requires per-sample coefficients"))?;
            dafl(tape, logits, labels, c, gamma)
        }
    }
}

/// Per-sample gradients of the per-sample loss with respect to the logits
/// (the batch-mean scaling is undone). Returns one row per sample.
pub fn logit_gradients<T: Scalar>(
    cfg: &LossConfig,
    logits: &Tensor<T>,
    labels: &[usize],
    coeffs: Option<&[f64]>,
    gamma: T,
) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let loss = evaluate(&mut tape, cfg, z, labels, coeffs, Gamma::Fixed(gamma))?;
    tape.backward(loss)?;
    let b = T::of(labels.len() as f64);
    let g = tape.grad(z).ok_or_else(|| Error::contract("logits received no gradient"))?;
    let c = logits.shape()[1];
    Ok(g.chunks(c).map(|row| row.iter().map(|&v| v * b).collect()).collect())
}
