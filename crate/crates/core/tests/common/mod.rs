//! Shared test oracles: central finite differences and a ViT loss harness.
#![allow(dead_code)]

use fedimb::losses::{dafl, Gamma};
use fedimb::model::{Bound, ModelParams, ModelSpec, ViTConfig};
use fedimb::{Scalar, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for the listed coordinates.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// One random DAFL problem on the toy ViT.
pub struct VitProblem {
    pub spec: ModelSpec,
    pub params: ModelParams<f64>,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub gamma: f64,
}

impl VitProblem {
    pub fn draw(cfg: ViTConfig, batch: usize, seed: u64) -> Self {
        let spec = ModelSpec::Vit(cfg.clone());
        let params = spec.init::<f64>(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let images = (0..batch)
            .map(|_| (0..cfg.input_len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let labels = (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
        let coeffs = (0..batch).map(|_| rng.random_range(0.0..5.0)).collect();
        let gamma = rng.random_range(0.5..3.0);
        Self {
            spec,
            params,
            images,
            labels,
            coeffs,
            gamma,
        }
    }

    /// Loss value and per-parameter tape gradients in precision `T`.
    pub fn loss_and_grads<T: Scalar>(&self, params: &ModelParams<T>) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::<T>::new();
        let bound = Bound::new(&mut tape, params, true);
        let imgs: Vec<Vec<T>> = self.images.iter().map(|i| i.iter().map(|&v| T::of(v)).collect()).collect();
        let refs: Vec<&[T]> = imgs.iter().map(Vec::as_slice).collect();
        let out = self.spec.forward(&mut tape, &bound, &refs).unwrap();
        let loss = dafl(&mut tape, out.logits, &self.labels, &self.coeffs, Gamma::Fixed(T::of(self.gamma))).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound
            .vars()
            .iter()
            .map(|&v| tape.grad(v).unwrap().iter().map(|g| g.as_f64()).collect())
            .collect();
        (tape.value(loss).data()[0].as_f64(), grads)
    }

    /// Loss in f64 at a flat parameter vector.
    pub fn loss_at(&self, flat: &[f64]) -> f64 {
        let mut p = self.params.clone();
        p.unflatten(flat).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = Bound::new(&mut tape, &p, false);
        let refs: Vec<&[f64]> = self.images.iter().map(Vec::as_slice).collect();
        let out = self.spec.forward(&mut tape, &bound, &refs).unwrap();
        let loss = dafl(&mut tape, out.logits, &self.labels, &self.coeffs, Gamma::Fixed(self.gamma)).unwrap();
        tape.value(loss).data()[0]
    }
}
