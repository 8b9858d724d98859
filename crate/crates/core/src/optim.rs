use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction. One moment buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.entries().iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update; `grads[i]` is `None` for parameters that received no
    /// gradient (they are left untouched, moments included).
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        if self.cfg.learning_rate == 0.0 {
            return Ok(());
        }
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::of(self.cfg.learning_rate);
        let eps = T::of(self.cfg.eps);
        for (i, (_, p)) in params.entries_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.len() != p.len() {
                return Err(Error::Shape {
                    op: "adam step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
