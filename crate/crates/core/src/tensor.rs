//! Dense row-major tensors and their on-disk encoding.
//!
//! The encoding is a single ASCII header line `dtype rank d1 ... dn`
//! followed by the little-endian scalar buffer. Integer label arrays
//! reuse the same layout with dtype `i64`.

use std::fmt;
use std::io::Write;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_grad(&mut self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header_line(T::DTYPE, &self.shape).into_bytes();
        out.reserve(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.put_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }
}

fn header_line(dtype: &str, shape: &[usize]) -> String {
    let mut s = format!("{dtype} {}", shape.len());
    for d in shape {
        s.push(' ');
        s.push_str(&d.to_string());
    }
    s.push('\n');
    s
}

/// A tensor decoded from bytes whose dtype is only known at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Decoded {
    pub fn shape(&self) -> &[usize] {
        match self {
            Decoded::F32(t) => t.shape(),
            Decoded::F64(t) => t.shape(),
            Decoded::I64 { shape, .. } => shape,
        }
    }

    pub fn into_f64(self) -> Option<Tensor<f64>> {
        match self {
            Decoded::F32(t) => Some(t.cast()),
            Decoded::F64(t) => Some(t),
            Decoded::I64 { .. } => None,
        }
    }
}

pub fn encode_i64(shape: &[usize], data: &[i64]) -> Vec<u8> {
    let mut out = header_line("i64", shape).into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one tensor starting at `*offset`, advancing it past the payload.
/// `file` only labels error messages.
pub fn decode(bytes: &[u8], offset: &mut usize, file: &str) -> Result<Decoded> {
    let start = *offset;
    let bad = |at: usize, message: String| Error::Ingest {
        file: file.to_string(),
        offset: at,
        message,
    };
    let rest = bytes
        .get(start..)
        .ok_or_else(|| bad(start, "offset past end of file".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad(start, "missing header line".into()))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| bad(start, "header is not ASCII".into()))?;
    let mut fields = header.split_ascii_whitespace();
    let dtype = fields
        .next()
        .ok_or_else(|| bad(start, "empty header".into()))?
        .to_string();
    let rank: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(start, format!("malformed rank in header {header:?}")))?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, format!("malformed dimension in header {header:?}")))?;
        if d == 0 {
            return Err(bad(start, format!("zero dimension in header {header:?}")));
        }
        shape.push(d);
    }
    if fields.next().is_some() {
        return Err(bad(start, format!("trailing fields in header {header:?}")));
    }
    let n: usize = shape.iter().product();
    let width = match dtype.as_str() {
        "f32" => 4,
        "f64" | "i64" => 8,
        other => return Err(bad(start, format!("unknown dtype {other:?}"))),
    };
    let body = start + nl + 1;
    let end = body + n * width;
    if bytes.len() < end {
        return Err(bad(
            body,
            format!("payload truncated: need {} bytes, have {}", n * width, bytes.len() - body),
        ));
    }
    let payload = &bytes[body..end];
    *offset = end;
    Ok(match dtype.as_str() {
        "f32" => Decoded::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::get_le).collect())?),
        "f64" => Decoded::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::get_le).collect())?),
        _ => Decoded::I64 {
            shape,
            data: payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        },
    })
}

/// Decodes a float tensor of exactly type `T`.
pub fn decode_as<T: Scalar>(bytes: &[u8], offset: &mut usize, file: &str) -> Result<Tensor<T>> {
    let at = *offset;
    let t = decode(bytes, offset, file)?;
    let wrong = |found: &str| Error::Ingest {
        file: file.to_string(),
        offset: at,
        message: format!("expected dtype {}, found {found}", T::DTYPE),
    };
    match t {
        Decoded::F32(t) if T::DTYPE == "f32" => Ok(t.cast()),
        Decoded::F64(t) if T::DTYPE == "f64" => Ok(t.cast()),
        Decoded::F32(_) => Err(wrong("f32")),
        Decoded::F64(_) => Err(wrong("f64")),
        Decoded::I64 { .. } => Err(wrong("i64")),
    }
}
