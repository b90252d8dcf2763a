//! Named parameter collections and the `MWCK1` checkpoint container.
//!
//! Layout (all integers little-endian u64, data little-endian f32):
//!
//! ```text
//! "MWCK1" | count | { name_len | name (UTF-8) | rank | dims[rank] | data[prod(dims)] } * count
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MWCK1";

/// Largest element count accepted when reading a checkpoint (2^34 floats).
const MAX_ELEMENTS: u64 = 1 << 34;
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter name is not valid UTF-8")]
    InvalidName,
    #[error("dimension overflow in parameter {0}")]
    DimensionOverflow(String),
    #[error("duplicate parameter {0}")]
    Duplicate(String),
    #[error("unexpected trailing bytes after last parameter")]
    TrailingData,
}

/// Insertion-ordered map from hierarchical parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::invalid("params", format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ParamVars<'t, T> {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant: usable in forward passes,
    /// never differentiated.
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> ParamVars<'t, T> {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// First parameter whose name or shape differs from `other`, if any.
    pub fn first_mismatch<U: Real>(&self, other: &ParamStore<U>) -> Option<String> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Some(format!("{name} (missing)")),
                Some(o) if o.shape() != t.shape() => {
                    return Some(format!("{name} (shape {:?} vs {:?})", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        other
            .names()
            .find(|n| !self.tensors.contains_key(*n))
            .map(|n| format!("{n} (unexpected)"))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = read_u64(r, "parameter count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(r, "name length")?;
            if len > MAX_NAME {
                return Err(CheckpointError::DimensionOverflow(format!("<name of {len} bytes>")));
            }
            let mut name = vec![0u8; len as usize];
            read_exact(r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::InvalidName)?;
            let rank = read_u64(r, "rank")?;
            if rank > MAX_RANK {
                return Err(CheckpointError::DimensionOverflow(name));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut total: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(r, "dims")?;
                total = total
                    .checked_mul(d)
                    .filter(|&t| t <= MAX_ELEMENTS)
                    .ok_or_else(|| CheckpointError::DimensionOverflow(name.clone()))?;
                dims.push(d as usize);
            }
            let mut raw = vec![0u8; total as usize * 4];
            read_exact(r, &mut raw, "data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(&dims, data).expect("element count checked");
            if store.tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CheckpointError::TrailingData);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Parameters bound to a tape, addressable by name.
pub struct ParamVars<'t, T: Real> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> ParamVars<'t, T> {
    /// Binds already-recorded variables under the given names.
    pub fn from_vars(named: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        ParamVars { vars: named.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::invalid("params", format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects gradients by name; parameters the loss does not reach get zeros.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.take(v)))
            .collect()
    }
}
