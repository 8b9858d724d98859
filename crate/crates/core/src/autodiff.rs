//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly, appends a node holding its output and
//! whatever the backward rule needs, and returns a [`Var`] handle. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and `backward` is a single reverse sweep.
//!
//! Shapes never broadcast. The one exception is [`Tape::add_row_bias`],
//! which adds a length-`n` vector to every row of an `m×n` matrix.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Affine(Var, T),
    Relu(Var),
    Log(Var),
    PowScalar(Var, T),
    PowVar(Var, Var),
    Clamp(Var, T, T),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Slice { x: Var, outer: usize, full: usize, start: usize, width: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SelectPerRow(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient held by `v` after [`Tape::backward`]. Leaves accumulate
    /// across calls; interior nodes hold the most recent sweep.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Sub(a, b), ng))
    }

    /// `x[m×n] + bias[n]` applied to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || self.value(bias).len() != n {
            return Err(shape_err("add_row_bias", &sx, &sb));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddRowBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant (non-differentiated) buffer.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("mul_const", self.shape(x), &[c.len()]));
        }
        let out: Vec<T> = self.data(x).iter().zip(&c).map(|(&v, &k)| v * k).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::MulConst(x, c), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `offset - x`, e.g. `1 - p`.
    pub fn rsub_scalar(&mut self, x: Var, offset: T) -> Var {
        self.unary(x, Op::Affine(x, offset), |v| offset - v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, &v)) = self
            .data(x)
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > T::zero()) || !v.is_finite())
        {
            return Err(Error::Numeric {
                op: "log",
                index: i,
                value: v.as_f64(),
            });
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn pow_scalar(&mut self, x: Var, p: T) -> Var {
        self.unary(x, Op::PowScalar(x, p), |v| v.powf(p))
    }

    /// `x^e` with a differentiable single-element exponent.
    pub fn pow_var(&mut self, x: Var, e: Var) -> Result<Var> {
        let p = self.value(e).item()?;
        let ng = self.ng(x) || self.ng(e);
        let v = self.unary(x, Op::PowVar(x, e), |v| v.powf(p));
        self.nodes[v.0].needs_grad = ng;
        Ok(v)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax along `axis`, computed as `exp(x - max) / sum`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                context: "softmax axis",
                index: axis,
                limit: shape.len(),
            });
        }
        if let Some((i, &v)) = self.data(x).iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                index: i,
                value: v.as_f64(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut m = src[at(0)];
                for j in 1..n {
                    m = m.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, n, inner }, ng))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both of length equal to the last dimension). Variance is the
    /// population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::contract("layer_norm on rank-0 tensor"))?;
        if self.value(gain).len() != n {
            return Err(shape_err("layer_norm gain", &shape, self.shape(gain)));
        }
        if self.value(bias).len() != n {
            return Err(shape_err("layer_norm bias", &shape, self.shape(bias)));
        }
        let rows = self.value(x).len() / n;
        let nf = T::of(n as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                context: "concat axis",
                index: axis,
                limit: base.len(),
            });
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            let (_, n, inner) = split_axis(s, axis);
            widths.push(n * inner);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            ng,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                context: "slice axis",
                index: axis,
                limit: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Index {
                context: "slice range end",
                index: start + len,
                limit: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let full = n * inner;
        let width = len * inner;
        let begin = start * inner;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&src[o * full + begin..o * full + begin + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice {
                x,
                outer,
                full,
                start: begin,
                width,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("transpose", &shape, &[2]));
        }
        let out = transpose_raw(self.data(x), shape[0], shape[1]);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![shape[1], shape[0]], out)?, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        let ng = self.ng(x);
        self.push(Tensor::scalar(acc), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        let n = T::of(self.value(x).len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(acc / n), Op::Mean(x), ng)
    }

    /// `out[b] = x[b, idx[b]]` for a rank-2 `x`.
    pub fn select_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(shape_err("select_per_row", &shape, &[idx.len()]));
        }
        let cols = shape[1];
        if let Some((_, &bad)) = idx.iter().enumerate().find(|(_, &c)| c >= cols) {
            return Err(Error::Index {
                context: "select_per_row",
                index: bad,
                limit: cols,
            });
        }
        let src = self.data(x);
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| src[r * cols + c]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![idx.len()], out)?, Op::SelectPerRow(x, idx.to_vec()), ng))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Leaves with `requires_grad` accumulate into their gradient slot, so
    /// calling this twice without [`Tape::zero_grad`] doubles leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; end];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..end).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (i, a) in adj.into_iter().enumerate() {
            let Some(g) = a else { continue };
            let node = &mut self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => node.value.accumulate_grad(&g),
                _ => node.value.set_grad(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zero = T::zero();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    // g[m×n] · bᵀ[n×k]
                    let bt = transpose_raw(self.data(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.ng(*b) {
                    // aᵀ[k×m] · g[m×n]
                    let at = transpose_raw(self.data(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::AddRowBias(x, bias) => {
                send(*x, g.to_vec());
                let n = self.value(*bias).len();
                let mut gb = vec![zero; n];
                for (j, &v) in g.iter().enumerate() {
                    gb[j % n] = gb[j % n] + v;
                }
                send(*bias, gb);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(db).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(da).map(|(&gi, &x)| gi * x).collect());
            }
            Op::MulConst(x, c) => send(*x, g.iter().zip(c).map(|(&gi, &k)| gi * k).collect()),
            Op::Scale(x, s) => send(*x, g.iter().map(|&gi| gi * *s).collect()),
            Op::Affine(x, _) => send(*x, g.iter().map(|&gi| -gi).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &v)| if v > zero { gi } else { zero })
                    .collect(),
            ),
            Op::Log(x) => send(*x, g.iter().zip(self.data(*x)).map(|(&gi, &v)| gi / v).collect()),
            Op::PowScalar(x, p) => send(
                *x,
                g.iter().zip(self.data(*x)).map(|(&gi, &v)| gi * pow_slope(v, *p)).collect(),
            ),
            Op::PowVar(x, e) => {
                let p = self.data(*e)[0];
                let base = self.data(*x);
                if self.ng(*x) {
                    send(*x, g.iter().zip(base).map(|(&gi, &v)| gi * pow_slope(v, p)).collect());
                }
                if self.ng(*e) {
                    // d(v^p)/dp = v^p ln v, taken as 0 at v = 0.
                    let mut acc = zero;
                    for ((&gi, &v), &y) in g.iter().zip(base).zip(out) {
                        if v > zero {
                            acc = acc + gi * y * v.ln();
                        }
                    }
                    send(*e, vec![acc]);
                }
            }
            Op::Clamp(x, lo, hi) => send(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &v)| if v < *lo || v > *hi { zero } else { gi })
                    .collect(),
            ),
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut dx = vec![zero; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut dot = zero;
                        for j in 0..n {
                            dot = dot + g[at(j)] * out[at(j)];
                        }
                        for j in 0..n {
                            dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let rows = inv_std.len();
                let gv = self.data(*gain);
                let nf = T::of(n as f64);
                if self.ng(*x) {
                    let mut dx = vec![zero; g.len()];
                    for r in 0..rows {
                        let mut m1 = zero;
                        let mut m2 = zero;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            m1 = m1 + d;
                            m2 = m2 + d * xhat[r * n + j];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            dx[r * n + j] = inv_std[r] * (d - m1 - xhat[r * n + j] * m2);
                        }
                    }
                    send(*x, dx);
                }
                let mut dg = vec![zero; n];
                let mut db = vec![zero; n];
                for r in 0..rows {
                    for j in 0..n {
                        dg[j] = dg[j] + g[r * n + j] * xhat[r * n + j];
                        db[j] = db[j] + g[r * n + j];
                    }
                }
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                    }
                    send(p, d);
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                full,
                start,
                width,
            } => {
                let mut d = vec![zero; outer * full];
                for o in 0..*outer {
                    d[o * full + start..o * full + start + width]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                send(*x, d);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                // g is [cols×rows]
                send(*x, transpose_raw(g, s[1], s[0]));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SelectPerRow(x, idx) => {
                let cols = self.shape(*x)[1];
                let mut d = vec![zero; self.value(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] = g[r];
                }
                send(*x, d);
            }
        }
    }
}

/// d(v^p)/dv, defined as 0 at v = 0 for every p (including p < 1).
fn pow_slope<T: Scalar>(v: T, p: T) -> T {
    if p == T::zero() || v == T::zero() {
        if p == T::one() {
            return T::one();
        }
        return T::zero();
    }
    p * v.powf(p - T::one())
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { index: 0, .. })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_and_symmetric_rows() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[3], &[1.0; 3]));
        let b = tape.constant(t(&[3], &[0.0; 3]));
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(t(&[2], &[1.0; 2]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[2], &[1.0; 2]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(tape.layer_norm(x, g, b, 0.0).unwrap_err().is_config());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let h = tape.constant(t(&[1], &[0.5]));
        let p = tape.pow_scalar(h, 2.0);
        assert_eq!(tape.value(p).data(), &[0.25]);
    }

    #[test]
    fn log_names_offending_index() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, -0.5]));
        match tape.log(x) {
            Err(Error::Numeric { op: "log", index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.param(t(&[3], &[-4.0, 5.0, 0.25]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-4.0, 5.0, 0.25]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_slice_transpose_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let tr = tape.transpose(s).unwrap();
        assert_eq!(tape.value(tr).data(), &[2.0, 4.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 2], &[1.0, 10.0, 100.0, 1000.0]));
        let m = tape.mul(tr, w).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0, 10.0]);
        assert_eq!(tape.grad(b).unwrap(), &[100.0, 1000.0]);
    }

    #[test]
    fn mismatched_add_is_rejected_not_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.add_row_bias(a, b).is_ok());
    }
}
