use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{decode_as, Scalar, Tensor};

/// Ordered named parameter tensors; the unit of federated aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::contract(format!("duplicate parameter name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// `(name, shape)` pairs in order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }

    /// First position where the two manifests disagree, if any.
    pub fn manifest_mismatch(&self, other: &Self) -> Option<String> {
        if self.entries.len() != other.entries.len() {
            return Some(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            ));
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .enumerate()
            .find(|(_, ((na, ta), (nb, tb)))| na != nb || ta.shape() != tb.shape())
            .map(|(i, ((na, ta), (nb, tb)))| {
                format!("entry {i}: {na:?} {:?} vs {nb:?} {:?}", ta.shape(), tb.shape())
            })
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat buffer produced by [`Self::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![self.num_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut at = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Checkpoint encoding: `checkpoint <count>` line, one name per line,
    /// then each tensor in the tensor encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("checkpoint {}\n", self.entries.len()).into_bytes();
        for (n, _) in &self.entries {
            out.extend_from_slice(n.as_bytes());
            out.push(b'\n');
        }
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Self> {
        let mut offset = 0;
        let next_line = |offset: &mut usize| -> Result<String> {
            let rest = &bytes[*offset..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Ingest {
                file: file.to_string(),
                offset: *offset,
                message: "unterminated manifest line".into(),
            })?;
            let line = String::from_utf8(rest[..nl].to_vec()).map_err(|_| Error::Ingest {
                file: file.to_string(),
                offset: *offset,
                message: "manifest line is not UTF-8".into(),
            })?;
            *offset += nl + 1;
            Ok(line)
        };
        let head = next_line(&mut offset)?;
        let count: usize = head
            .strip_prefix("checkpoint ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Ingest {
                file: file.to_string(),
                offset: 0,
                message: format!("bad checkpoint header {head:?}"),
            })?;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            names.push(next_line(&mut offset)?);
        }
        let mut entries = Vec::with_capacity(count);
        for name in names {
            let t = decode_as::<T>(bytes, &mut offset, file)?;
            entries.push((name, t));
        }
        if offset != bytes.len() {
            return Err(Error::Ingest {
                file: file.to_string(),
                offset,
                message: "trailing bytes after last tensor".into(),
            });
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

/// Parameters registered on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Records every tensor as a leaf; `trainable` selects whether the
    /// leaves are differentiated.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (n, t) in params.entries() {
            names.push(n.clone());
            vars.push(tape.leaf(t.clone().with_requires_grad(trainable)));
        }
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
