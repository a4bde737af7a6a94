//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `CVFM`, format version (u32), ten u32 config fields (m, patch_size,
//! n, d_model, num_heads, d_k, ffn_ratio, layers, num_classes, fusion_every),
//! tensor count (u32), then per tensor: name length (u32), UTF-8 name, rank
//! (u32), each dimension (u64), and the values as raw 32-bit floats in
//! row-major order. Values are stored at 32-bit precision in every mode, so
//! save followed by load is bit-exact for 32-bit runs.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CVFM";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct LoadedCheckpoint<S: Scalar> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<S>)>,
}

pub fn save<S: Scalar>(path: &Path, config: &ModelConfig, store: &ParamStore<S>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        config.m,
        config.patch_size,
        config.n(),
        config.d_model,
        config.num_heads,
        config.d_k(),
        config.ffn_ratio,
        config.layers,
        config.num_classes,
        config.fusion_every,
    ] {
        buf.extend_from_slice(&(field as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let mut fields = [0usize; 10];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let config = ModelConfig {
        m: fields[0],
        patch_size: fields[1],
        d_model: fields[3],
        num_heads: fields[4],
        ffn_ratio: fields[6],
        layers: fields[7],
        num_classes: fields[8],
        fusion_every: fields[9],
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    if config.n() != fields[2] || config.d_k() != fields[5] {
        return Err(Error::Checkpoint(format!(
            "stored derived fields (n={}, d_k={}) disagree with config (n={}, d_k={})",
            fields[2],
            fields[5],
            config.n(),
            config.d_k()
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name}: dimension overflow"))
            })?;
            shape.push(d);
        }
        let raw = r.take(numel * 4)?;
        let data: Vec<S> = raw
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(LoadedCheckpoint { config, tensors })
}

/// Copy checkpoint tensors into an already-registered store. Every store
/// parameter must be present with a matching shape, and every checkpoint
/// tensor must land somewhere.
pub fn install<S: Scalar>(loaded: &LoadedCheckpoint<S>, store: &mut ParamStore<S>) -> Result<()> {
    let mut used = vec![false; loaded.tensors.len()];
    for idx in 0..store.len() {
        let id = crate::params::ParamId(idx);
        let name = store.name(id).to_string();
        let found = loaded.tensors.iter().position(|(n, _)| *n == name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint has no tensor named {name}"))
        })?;
        let (_, tensor) = &loaded.tensors[found];
        let dst = store.get_mut(id);
        if dst.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(tensor.data());
        used[found] = true;
    }
    if let Some(extra) = used.iter().position(|u| !u) {
        return Err(Error::Checkpoint(format!(
            "checkpoint tensor {} has no matching model parameter",
            loaded.tensors[extra].0
        )));
    }
    Ok(())
}
