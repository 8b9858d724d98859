//! Classifier models sharing one forward/parameter interface: the tiny
//! Vision Transformer and a one-hidden-layer MLP baseline.

mod params;
pub mod vit;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{Bound, ModelParams};
pub use vit::{patchify, unpatchify, AttentionMaps, PositionalEncoding, ViTConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 32,
            num_classes: 5,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("mlp dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (f, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        f * h + h + h * c + c
    }

    pub fn init<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ModelParams<T>> {
        self.validate()?;
        let (f, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        ModelParams::new(vec![
            ("mlp.w1".into(), uniform_fan_in(rng, &[f, h], f)),
            ("mlp.b1".into(), Tensor::zeros(&[h])),
            ("mlp.w2".into(), uniform_fan_in(rng, &[h, c], h)),
            ("mlp.b2".into(), Tensor::zeros(&[c])),
        ])
    }

    /// `relu(x W1 + b1) W2 + b2` for a `[B×F]` batch.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params.get("mlp.w1")?)?;
        let h = tape.add_row_bias(h, params.get("mlp.b1")?)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, params.get("mlp.w2")?)?;
        tape.add_row_bias(o, params.get("mlp.b2")?)
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Vit(ViTConfig),
    Mlp(MlpConfig),
}

/// Result of a batched forward pass.
pub struct Forward {
    /// `[B×C]`
    pub logits: Var,
    /// Per sample, per layer, per head. Empty for the MLP.
    pub attention: Vec<AttentionMaps>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Vit(c) => c.validate(),
            ModelSpec::Mlp(c) => c.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Vit(c) => c.num_classes,
            ModelSpec::Mlp(c) => c.num_classes,
        }
    }

    /// Number of scalars per input sample.
    pub fn input_len(&self) -> usize {
        match self {
            ModelSpec::Vit(c) => c.input_len(),
            ModelSpec::Mlp(c) => c.input_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Vit(c) => c.param_count(),
            ModelSpec::Mlp(c) => c.param_count(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelSpec::Vit(_) => "vit",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ModelSpec::Vit(c) => c.init(&mut rng),
            ModelSpec::Mlp(c) => c.init(&mut rng),
        }
    }

    /// Forward pass over `inputs`, each a flat sample of `input_len()`
    /// scalars (`C×H×W` for the ViT).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, inputs: &[&[T]]) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        let len = self.input_len();
        if let Some(bad) = inputs.iter().find(|s| s.len() != len) {
            return Err(Error::Shape {
                op: "model input",
                lhs: vec![len],
                rhs: vec![bad.len()],
            });
        }
        match self {
            ModelSpec::Mlp(c) => {
                let mut flat = Vec::with_capacity(inputs.len() * len);
                for s in inputs {
                    flat.extend_from_slice(s);
                }
                let x = tape.constant(Tensor::new(vec![inputs.len(), len], flat)?);
                Ok(Forward {
                    logits: c.forward(tape, params, x)?,
                    attention: Vec::new(),
                })
            }
            ModelSpec::Vit(c) => {
                let ctx = c.batch_context(tape, params)?;
                let mut rows = Vec::with_capacity(inputs.len());
                let mut attention = Vec::with_capacity(inputs.len());
                for s in inputs {
                    let (logits, maps) = c.forward_one(tape, params, &ctx, s)?;
                    rows.push(logits);
                    attention.push(maps);
                }
                let logits = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
                Ok(Forward { logits, attention })
            }
        }
    }

    /// Logits for a batch without recording gradients for parameters.
    pub fn predict<T: Scalar>(&self, params: &ModelParams<T>, inputs: &[&[T]]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let out = self.forward(&mut tape, &bound, inputs)?;
        let logits = tape.value(out.logits).clone();
        if !logits.all_finite() {
            let (i, v) = logits
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
                .expect("checked above");
            return Err(Error::Numeric {
                op: "forward",
                index: i,
                value: v.as_f64(),
            });
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_hand_computed() {
        let spec = MlpConfig {
            input_dim: 2,
            hidden_dim: 2,
            num_classes: 2,
        };
        let p = ModelParams::new(vec![
            ("mlp.w1".into(), Tensor::from_f64(vec![2, 2], &[1.0, -1.0, 2.0, 0.5]).unwrap()),
            ("mlp.b1".into(), Tensor::from_f64(vec![2], &[0.0, -3.0]).unwrap()),
            ("mlp.w2".into(), Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("mlp.b2".into(), Tensor::from_f64(vec![2], &[0.5, -0.5]).unwrap()),
        ])
        .unwrap();
        // x = [1, 2]: pre = [1 + 4, -1 + 1 - 3] = [5, -3]; relu = [5, 0]
        // out = [5*1 + 0.5, 5*2 - 0.5] = [5.5, 9.5]
        let logits = ModelSpec::Mlp(spec).predict(&p, &[&[1.0, 2.0]]).unwrap();
        assert_eq!(logits.data(), &[5.5, 9.5]);
    }

    #[test]
    fn mlp_zero_weights_give_equal_logits() {
        let spec = ModelSpec::Mlp(MlpConfig::default());
        let mut p = spec.init::<f64>(3).unwrap();
        for (_, t) in p.entries_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = vec![0.7; 16];
        let logits = spec.predict(&p, &[&x]).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn param_counts_match_closed_form() {
        let specs = [
            ModelSpec::Vit(ViTConfig::default()),
            ModelSpec::Vit(ViTConfig {
                image_size: 16,
                patch_size: 4,
                channels: 3,
                embed_dim: 24,
                num_heads: 3,
                head_dim: 8,
                ffn_dim: 48,
                num_layers: 3,
                num_classes: 7,
                positional: PositionalEncoding::Learned,
                ..ViTConfig::default()
            }),
            ModelSpec::Mlp(MlpConfig {
                input_dim: 9,
                hidden_dim: 4,
                num_classes: 2,
            }),
        ];
        for s in specs {
            let p = s.init::<f32>(0).unwrap();
            assert_eq!(p.num_scalars(), s.param_count(), "{s:?}");
        }
        // default ViT, hand count: 64*32+32 + 2*(4096+128+2048+64+2048+32) + 32*5+5
        assert_eq!(ViTConfig::default().param_count(), 2080 + 2 * 8416 + 165);
    }

    #[test]
    fn init_is_deterministic() {
        let s = ModelSpec::Vit(ViTConfig::default());
        assert_eq!(s.init::<f32>(11).unwrap(), s.init::<f32>(11).unwrap());
        assert_ne!(s.init::<f32>(11).unwrap(), s.init::<f32>(12).unwrap());
    }
}
