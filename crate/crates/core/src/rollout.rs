//! Gradient-weighted attention rollout.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{self, Gamma, LossConfig};
use crate::model::{Bound, ModelParams, ViTConfig};
use crate::tensor::Scalar;

/// Attention maps and their loss gradients for one layer, one `[T×T]`
/// row-major matrix per head.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub maps: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
    pub tokens: usize,
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `Ã = rownorm(I + mean_h ReLU(A_h ⊙ G_h))` for one layer.
pub fn fused_layer(layer: &LayerAttention) -> Result<Vec<f64>> {
    let n = layer.tokens;
    if layer.maps.is_empty() || layer.maps.len() != layer.grads.len() {
        return Err(Error::contract(format!(
            "rollout layer has {} maps and {} gradients",
            layer.maps.len(),
            layer.grads.len()
        )));
    }
    let heads = layer.maps.len() as f64;
    let mut fused = vec![0.0; n * n];
    for (a, g) in layer.maps.iter().zip(&layer.grads) {
        if a.len() != n * n || g.len() != n * n {
            return Err(Error::Shape {
                op: "rollout head",
                lhs: vec![n, n],
                rhs: vec![a.len(), g.len()],
            });
        }
        for ((f, &x), &y) in fused.iter_mut().zip(a).zip(g) {
            *f += (x * y).max(0.0) / heads;
        }
    }
    for i in 0..n {
        fused[i * n + i] += 1.0;
        let row = &mut fused[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(fused)
}

/// Chains the fused layers (`R = Ã_1 Ã_2 … Ã_L`) and returns row 0,
/// columns `1..T`, min-max scaled to `[0, 1]`.
pub fn attention_rollout(layers: &[LayerAttention]) -> Result<Vec<f64>> {
    let first = layers.first().ok_or_else(|| Error::contract("rollout over zero layers"))?;
    let n = first.tokens;
    if n < 2 {
        return Err(Error::contract("rollout needs a class token and at least one patch"));
    }
    let mut r = fused_layer(first)?;
    for l in &layers[1..] {
        if l.tokens != n {
            return Err(Error::contract("rollout layers disagree on token count"));
        }
        r = matmul(&r, &fused_layer(l)?, n);
    }
    let mask: Vec<f64> = r[1..n].to_vec();
    Ok(min_max(mask))
}

fn min_max(v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.into_iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Runs one image through the ViT, backpropagates the loss for `label`
/// and collects every layer's attention maps with their gradients.
pub fn collect_attention<T: Scalar>(
    cfg: &ViTConfig,
    params: &ModelParams<T>,
    image: &[T],
    label: usize,
    loss: &LossConfig,
    coeff: f64,
    gamma: T,
) -> Result<Vec<LayerAttention>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let ctx = cfg.batch_context(&mut tape, &bound)?;
    let (logits, maps) = cfg.forward_one(&mut tape, &bound, &ctx, image)?;
    let l = losses::evaluate(&mut tape, loss, logits, &[label], Some(&[coeff]), Gamma::Fixed(gamma))?;
    tape.backward(l)?;
    let tokens = cfg.tokens();
    maps.iter()
        .map(|heads| {
            let mut out = LayerAttention {
                maps: Vec::new(),
                grads: Vec::new(),
                tokens,
            };
            for &h in heads {
                out.maps.push(tape.value(h).to_f64_vec());
                let g = tape
                    .grad(h)
                    .ok_or_else(|| Error::contract("attention map received no gradient"))?;
                out.grads.push(g.iter().map(|v| v.as_f64()).collect());
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_attention_gives_flat_mask() {
        let l = LayerAttention {
            maps: vec![ident(5)],
            grads: vec![vec![1.0; 25]],
            tokens: 5,
        };
        let m = attention_rollout(&[l]).unwrap();
        assert_eq!(m, vec![0.0; 4]);
    }

    #[test]
    fn fused_rows_are_distributions() {
        let n = 4;
        let l = LayerAttention {
            maps: vec![(0..16).map(|i| i as f64 / 16.0).collect(), vec![0.25; 16]],
            grads: vec![(0..16).map(|i| (i as f64 - 7.0) * 0.3).collect(), vec![-1.0; 16]],
            tokens: n,
        };
        let f = fused_layer(&l).unwrap();
        for row in f.chunks(n) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradients_rejected() {
        let l = LayerAttention {
            maps: vec![ident(3)],
            grads: vec![],
            tokens: 3,
        };
        assert!(matches!(attention_rollout(&[l]), Err(Error::Contract(_))));
    }
}
