//! Post-norm Vision Transformer encoder with a class-token classifier head.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ModelParams};
use super::uniform_fan_in;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    /// Fixed sine/cosine table, not a parameter.
    Sinusoidal,
    /// Trainable `(N+1)×D` table.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub layer_norm_eps: f64,
    pub positional: PositionalEncoding,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            num_heads: 4,
            head_dim: 8,
            ffn_dim: 64,
            num_layers: 2,
            num_classes: 5,
            layer_norm_eps: 1e-5,
            positional: PositionalEncoding::Sinusoidal,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("vit.{name} must be >= 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "embed_dim {} != num_heads {} * head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("vit.layer_norm_eps must be > 0"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Closed-form scalar count of [`ViTConfig::init`].
    pub fn param_count(&self) -> usize {
        let (d, f, c) = (self.embed_dim, self.ffn_dim, self.num_classes);
        let embed = self.patch_dim() * d + d;
        let pos = match self.positional {
            PositionalEncoding::Learned => self.tokens() * d,
            PositionalEncoding::Sinusoidal => 0,
        };
        let layer = 4 * d * d + 2 * 2 * d + d * f + f + f * d + d;
        embed + pos + self.num_layers * layer + d * c + c
    }

    pub fn init<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ModelParams<T>> {
        self.validate()?;
        let (d, f, c) = (self.embed_dim, self.ffn_dim, self.num_classes);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let mut p = ModelParams::new(Vec::new())?;
        p.push("embed.proj", uniform_fan_in(rng, &[d, self.patch_dim()], self.patch_dim()))?;
        p.push("embed.cls", Tensor::from_fn(&[1, d], |_| T::of(small.sample(rng))))?;
        if self.positional == PositionalEncoding::Learned {
            p.push("embed.pos", Tensor::from_fn(&[self.tokens(), d], |_| T::of(small.sample(rng))))?;
        }
        for l in 0..self.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.push(format!("layers.{l}.attn.{w}"), uniform_fan_in(rng, &[d, d], d))?;
            }
            p.push(format!("layers.{l}.norm1.gain"), Tensor::full(&[d], T::one()))?;
            p.push(format!("layers.{l}.norm1.bias"), Tensor::zeros(&[d]))?;
            p.push(format!("layers.{l}.ffn.w1"), uniform_fan_in(rng, &[d, f], d))?;
            p.push(format!("layers.{l}.ffn.b1"), Tensor::zeros(&[f]))?;
            p.push(format!("layers.{l}.ffn.w2"), uniform_fan_in(rng, &[f, d], f))?;
            p.push(format!("layers.{l}.ffn.b2"), Tensor::zeros(&[d]))?;
            p.push(format!("layers.{l}.norm2.gain"), Tensor::full(&[d], T::one()))?;
            p.push(format!("layers.{l}.norm2.bias"), Tensor::zeros(&[d]))?;
        }
        p.push("head.weight", uniform_fan_in(rng, &[d, c], d))?;
        p.push("head.bias", Tensor::zeros(&[c]))?;
        Ok(p)
    }

    /// Fixed sine/cosine table of shape `tokens × D`.
    pub fn sinusoidal_table<T: Scalar>(&self) -> Tensor<T> {
        let d = self.embed_dim;
        Tensor::from_fn(&[self.tokens(), d], |i| {
            let (pos, j) = ((i / d) as f64, i % d);
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos / freq;
            T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
    }
}

/// Splits a `C×H×W` image into `(H/p)²` rows of length `p²·C`, in raster
/// order of patches; each row lists channel, then patch row, then column.
pub fn patchify<T: Scalar>(image: &[T], cfg: &ViTConfig) -> Result<Tensor<T>> {
    if cfg.patch_size == 0 || !cfg.image_size.is_multiple_of(cfg.patch_size) {
        return Err(Error::config(format!(
            "image_size {} is not divisible by patch_size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    if image.len() != cfg.input_len() {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![cfg.channels, cfg.image_size, cfg.image_size],
            rhs: vec![image.len()],
        });
    }
    let (s, p, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let side = s / p;
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..side {
        for pc in 0..side {
            for c in 0..ch {
                for dy in 0..p {
                    let y = pr * p + dy;
                    let start = c * s * s + y * s + pc * p;
                    out.extend_from_slice(&image[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &ViTConfig) -> Result<Vec<T>> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        });
    }
    let (s, p, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let side = s / p;
    let mut img = vec![T::zero(); cfg.input_len()];
    let mut src = patches.data().iter();
    for pr in 0..side {
        for pc in 0..side {
            for c in 0..ch {
                for dy in 0..p {
                    let y = pr * p + dy;
                    for dx in 0..p {
                        img[c * s * s + y * s + pc * p + dx] = *src.next().expect("sized above");
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Per-layer, per-head attention map handles for one sample.
pub type AttentionMaps = Vec<Vec<Var>>;

/// Tape handles shared by every sample of one batch.
pub struct VitBatchContext {
    proj_t: Var,
    pos: Var,
}

impl ViTConfig {
    pub fn batch_context<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound) -> Result<VitBatchContext> {
        let proj = params.get("embed.proj")?;
        let proj_t = tape.transpose(proj)?;
        let pos = match self.positional {
            PositionalEncoding::Learned => params.get("embed.pos")?,
            PositionalEncoding::Sinusoidal => tape.constant(self.sinusoidal_table()),
        };
        Ok(VitBatchContext { proj_t, pos })
    }

    /// Class token followed by projected patches, plus positional encoding.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, ctx: &VitBatchContext, patches: Var) -> Result<Var> {
        let emb = tape.matmul(patches, ctx.proj_t)?;
        let cls = params.get("embed.cls")?;
        let z = tape.concat(&[cls, emb], 0)?;
        let pos_shape = tape.shape(ctx.pos).to_vec();
        if pos_shape[0] != tape.shape(z)[0] {
            return Err(Error::Shape {
                op: "positional encoding rows",
                lhs: pos_shape,
                rhs: tape.shape(z).to_vec(),
            });
        }
        tape.add(z, ctx.pos)
    }

    /// Multi-head scaled dot-product self-attention followed by the output
    /// projection. Returns the output and one attention map per head.
    pub fn multi_head_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        layer: usize,
        z: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let wq = params.get(&format!("layers.{layer}.attn.wq"))?;
        let wk = params.get(&format!("layers.{layer}.attn.wk"))?;
        let wv = params.get(&format!("layers.{layer}.attn.wv"))?;
        let wo = params.get(&format!("layers.{layer}.attn.wo"))?;
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let dk = self.head_dim;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut maps = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = tape.slice(q, 1, h * dk, dk)?;
            let kh = tape.slice(k, 1, h * dk, dk)?;
            let vh = tape.slice(v, 1, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax(logits, 1)?;
            maps.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        Ok((tape.matmul(cat, wo)?, maps))
    }

    /// `z' = LN(z + MHA(z))`, `z_next = LN(z' + FFN(z'))`.
    pub fn encoder_layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        layer: usize,
        z: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let eps = T::of(self.layer_norm_eps);
        let p = |s: &str| params.get(&format!("layers.{layer}.{s}"));
        let (attn, maps) = self.multi_head_attention(tape, params, layer, z)?;
        let r1 = tape.add(z, attn)?;
        let z1 = tape.layer_norm(r1, p("norm1.gain")?, p("norm1.bias")?, eps)?;
        let h = tape.matmul(z1, p("ffn.w1")?)?;
        let h = tape.add_row_bias(h, p("ffn.b1")?)?;
        let h = tape.relu(h);
        let f = tape.matmul(h, p("ffn.w2")?)?;
        let f = tape.add_row_bias(f, p("ffn.b2")?)?;
        let r2 = tape.add(z1, f)?;
        let out = tape.layer_norm(r2, p("norm2.gain")?, p("norm2.bias")?, eps)?;
        Ok((out, maps))
    }

    /// Logits `[1×C]` for one image, plus its attention maps.
    pub fn forward_one<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        ctx: &VitBatchContext,
        image: &[T],
    ) -> Result<(Var, AttentionMaps)> {
        let patches = tape.constant(patchify(image, self)?);
        let mut z = self.embed(tape, params, ctx, patches)?;
        let mut maps = Vec::with_capacity(self.num_layers);
        for l in 0..self.num_layers {
            let (next, m) = self.encoder_layer(tape, params, l, z)?;
            z = next;
            maps.push(m);
        }
        let cls = tape.slice(z, 0, 0, 1)?;
        let logits = tape.matmul(cls, params.get("head.weight")?)?;
        Ok((tape.add_row_bias(logits, params.get("head.bias")?)?, maps))
    }
}
