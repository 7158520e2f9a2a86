//! Versioned container of named f64 tensors plus a JSON metadata blob.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "TDCK"
//! version      u32      FORMAT_VERSION
//! meta_len     u64
//! metadata     meta_len bytes of UTF-8 JSON
//! count        u32      number of tensors
//! repeated count times, in lexicographic name order:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × f64
//! ```
//!
//! The same container holds predictor checkpoints, full detector checkpoints
//! and externally produced per-frame embedding matrices.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(expected, data.len()));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Store every parameter of `module` under `prefix.`.
    pub fn insert_module(&mut self, prefix: &str, module: &dyn Parameterized) {
        module.visit_params(&mut |name, p| {
            self.tensors.insert(
                format!("{prefix}.{name}"),
                Tensor {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
    }

    /// Overwrite every parameter of `module` from tensors under `prefix.`.
    pub fn load_module(&self, prefix: &str, module: &mut dyn Parameterized) -> Result<()> {
        let mut failure = None;
        module.visit_params_mut(&mut |name, p: &mut Param| {
            if failure.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match self.tensors.get(&key) {
                Some(t) if t.shape == p.shape => p.value.copy_from_slice(&t.data),
                Some(t) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor '{key}' has shape {:?}, expected {:?}",
                        t.shape, p.shape
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("missing tensor '{key}'"))),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
            for d in &tensor.shape {
                out.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(tensor.data.len() * 8);
            for v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u64(&mut input)? as usize;
        let meta = read_vec(&mut input, meta_len)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut input)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let name = String::from_utf8(read_vec(&mut input, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut input)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = read_vec(&mut input, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.insert(name, Tensor { shape, data });
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec(input: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_fixed() {
        let ckpt = Checkpoint::new(serde_json::json!({}));
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..4], b"TDCK");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..18], b"{}");
        assert_eq!(&bytes[18..22], &[0, 0, 0, 0]);
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut ckpt = Checkpoint::new(serde_json::json!({"kind": "test"}));
        ckpt.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut bytes = ckpt.to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        bytes[4] = 9;
        let err = Checkpoint::read_from(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn round_trip_preserves_tensors_bitwise() {
        let mut ckpt = Checkpoint::new(serde_json::json!({"clip_length": 7}));
        ckpt.insert("a.weight", Tensor::new(vec![3], vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap());
        ckpt.insert("b", Tensor::new(vec![1, 2, 1], vec![1e300, -2.5]).unwrap());
        let back = Checkpoint::read_from(ckpt.to_bytes().as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.get("a.weight").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
    }
}
