//! Named-tensor checkpoint file and the parameter store built on it.
//!
//! File layout (little-endian): magic `UFOT`, version u32, count u32, then
//! per tensor: name length u16 + UTF-8 name, rank u8, extents u32 each, raw
//! 32-bit floats. Version 1 is the interchange format and always carries
//! f32 payloads; version 2 prefixes each payload with a dtype byte
//! (1 = f32, 2 = f64) so 64-bit training state can round-trip losslessly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tape, TensorRef};
use crate::scalar::Scalar;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"UFOT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| T::from_f32(x)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            payload: Payload::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            payload: Payload::F64(data),
        }
    }
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let any_f64 = tensors.iter().any(|t| matches!(t.payload, Payload::F64(_)));
    let version: u32 = if any_f64 { 2 } else { 1 };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Format(format!(
                "tensor name too long: {}",
                t.name
            )));
        }
        let numel: usize = t.shape.iter().product();
        if numel != t.payload.len() {
            return Err(CheckpointError::Format(format!(
                "tensor {} shape {:?} does not match payload length {}",
                t.name,
                t.shape,
                t.payload.len()
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.shape.len() as u8])?;
        for &e in &t.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        match (&t.payload, version) {
            (Payload::F32(v), 1) => {
                for &x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            (Payload::F32(v), _) => {
                w.write_all(&[1u8])?;
                for &x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            (Payload::F64(v), _) => {
                w.write_all(&[2u8])?;
                for &x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Format(format!("truncated checkpoint while reading {what}")))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {magic:?}, expected UFOT"
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != 1 && version != 2 {
        return Err(CheckpointError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    read_exact(&mut r, &mut u32buf, "count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact(&mut r, &mut u16buf, "name length")?;
        let nlen = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; nlen];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Format("tensor name not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            read_exact(&mut r, &mut u32buf, "extent")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let dtype = if version == 1 {
            1u8
        } else {
            let mut d = [0u8; 1];
            read_exact(&mut r, &mut d, "dtype")?;
            d[0]
        };
        let payload = match dtype {
            1 => {
                let mut data = Vec::with_capacity(numel);
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    read_exact(&mut r, &mut buf, "payload")?;
                    data.push(f32::from_le_bytes(buf));
                }
                Payload::F32(data)
            }
            2 => {
                let mut data = Vec::with_capacity(numel);
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    read_exact(&mut r, &mut buf, "payload")?;
                    data.push(f64::from_le_bytes(buf));
                }
                Payload::F64(data)
            }
            d => {
                return Err(CheckpointError::Format(format!(
                    "unknown dtype tag {d} for tensor {name}"
                )))
            }
        };
        out.push(NamedTensor {
            name,
            shape,
            payload,
        });
    }
    Ok(out)
}

/// One learnable tensor with its gradient and AdamW moments.
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// All trainable state, keyed by name, iterated in insertion order so
/// serialization and optimizer sweeps are deterministic.
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Record of which tape leaves correspond to which params in one forward
/// pass, so gradients can be harvested after backward.
#[derive(Default)]
pub struct ParamBindings {
    pairs: Vec<(usize, TensorRef)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Define a parameter if absent; returns its index.
    pub fn define(&mut self, name: &str, shape: Vec<usize>, init: Vec<T>) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let numel: usize = shape.iter().product();
        assert_eq!(numel, init.len(), "param {name} init length mismatch");
        let i = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            grad: vec![T::ZERO; numel],
            m: vec![T::ZERO; numel],
            v: vec![T::ZERO; numel],
            data: init,
        });
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Leaf the parameter onto a tape and remember the binding.
    pub fn bind(&self, tape: &Tape<T>, bindings: &mut ParamBindings, name: &str) -> TensorRef {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let p = &self.params[i];
        let t = tape.leaf(p.shape.clone(), p.data.clone());
        bindings.pairs.push((i, t));
        t
    }

    /// Accumulate tape gradients into the store.
    pub fn harvest(&mut self, tape: &Tape<T>, bindings: &ParamBindings) {
        for &(i, t) in &bindings.pairs {
            if let Some(g) = tape.grad(t) {
                for (dst, src) in self.params[i].grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            for &g in &p.grad {
                let g = g.to_f64();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// Serialize parameter values (f32 payloads in f32 mode, f64 payloads
    /// otherwise, chosen per the scalar type's width).
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| {
                if wide::<T>() {
                    NamedTensor::f64(
                        p.name.clone(),
                        p.shape.clone(),
                        p.data.iter().map(|v| v.to_f64()).collect(),
                    )
                } else {
                    NamedTensor::f32(
                        p.name.clone(),
                        p.shape.clone(),
                        p.data.iter().map(|v| v.to_f32()).collect(),
                    )
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save(path, &self.to_tensors())
    }

    /// Load values into already-defined parameters (shapes must match).
    pub fn load_values(&mut self, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
        for t in tensors {
            let Some(&i) = self.index.get(&t.name) else {
                return Err(CheckpointError::Format(format!(
                    "checkpoint tensor {} not defined in model",
                    t.name
                )));
            };
            if self.params[i].shape != t.shape {
                return Err(CheckpointError::Format(format!(
                    "tensor {} shape {:?} != model shape {:?}",
                    t.name, t.shape, self.params[i].shape
                )));
            }
            self.params[i].data = t.payload.to_scalars();
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn wide<T: Scalar>() -> bool {
    std::mem::size_of::<T>() == 8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ufot");
        let tensors = vec![
            NamedTensor::f32("a/w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-20, 7.5]),
            NamedTensor::f32("b", vec![1], vec![f32::from_bits(0x_7f7f_ffff)]),
        ];
        save(&path, &tensors).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(tensors.len(), back.len());
        for (a, b) in tensors.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            match (&a.payload, &b.payload) {
                (Payload::F32(x), Payload::F32(y)) => {
                    for (u, v) in x.iter().zip(y) {
                        assert_eq!(u.to_bits(), v.to_bits());
                    }
                }
                _ => panic!("payload kind changed"),
            }
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ufot");
        save(
            &path,
            &[NamedTensor::f32("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ufot");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn f64_payloads_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ufot");
        let t = vec![NamedTensor::f64(
            "opt/m",
            vec![3],
            vec![0.1, -1.0 / 3.0, 2.0f64.sqrt()],
        )];
        save(&path, &t).unwrap();
        let back = load(&path).unwrap();
        match (&t[0].payload, &back[0].payload) {
            (Payload::F64(x), Payload::F64(y)) => {
                for (u, v) in x.iter().zip(y) {
                    assert_eq!(u.to_bits(), v.to_bits());
                }
            }
            _ => panic!("payload kind changed"),
        }
    }
}
