//! Weight checkpoints.
//!
//! Layout, little-endian: magic `ESSCWGT`, `u32` version, 32-byte SHA-256 of
//! the config JSON, `u32` JSON length, the JSON itself, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` extents
//! and `f64` values. Tensors are stored in name order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RefineConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"ESSCWGT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RefineConfig,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config: &RefineConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&json));
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a weight checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest = c.take(32)?.to_vec();
    let json_len = c.u32()?;
    let json = c.take(json_len)?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(Error::Format("checkpoint config digest mismatch".into()));
    }
    let config: RefineConfig = serde_json::from_slice(json)?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())) else {
            return Err(Error::Format(format!("tensor {name} has an implausible shape {shape:?}")));
        };
        let data = c
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { config, params })
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(path: &Path, config: &RefineConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let bytes = encode(config, params)?;
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
