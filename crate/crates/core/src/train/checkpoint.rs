//! `LRNC` checkpoint files: named tensors plus a JSON metadata block.
//!
//! Layout (little-endian): magic `LRNC`, u32 version, u32 tensor count; per tensor
//! u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 ndim, ndim × u32 dims,
//! raw payload; then u32 length and UTF-8 JSON metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetSpec, NetworkInstance};
use crate::tensor::{Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"LRNC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub spec_hash: String,
    /// Training RNG position: seed and word offset of the ChaCha stream.
    pub rng_seed: u64,
    pub rng_word_pos: String,
    pub spec: NetSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u32>,
    /// Payload bytes exactly as stored.
    pub payload: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!("tensor {} has dtype {}, expected {}", self.name, self.dtype, T::DTYPE_CODE)));
        }
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        if d.len() != 4 {
            return Err(Error::Format(format!("tensor {} has {} dims, expected 4", self.name, d.len())));
        }
        let data = self.payload.chunks_exact(T::BYTES).map(T::from_le_chunk).collect();
        Tensor::from_vec(Shape::new(d[0], d[1], d[2], d[3]), data)
    }
}

pub fn encode<T: Element>(tensors: &[(String, &Tensor<T>)], meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(T::DTYPE_CODE);
        out.push(4);
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        T::to_le_bytes_vec(t.data(), &mut out);
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

fn u32_at(r: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4, what)?.try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<StoredTensor>, CheckpointMeta)> {
    let mut r = bytes;
    if take(&mut r, 4, "magic")? != MAGIC {
        return Err(Error::Format("not an LRNC checkpoint".into()));
    }
    let version = u32_at(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r, 2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut r, len, "name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = take(&mut r, 1, "dtype")?[0];
        let elem = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(Error::Format(format!("unknown dtype code {d}"))),
        };
        let ndim = take(&mut r, 1, "ndim")?[0] as usize;
        let dims = (0..ndim).map(|_| u32_at(&mut r, "dims")).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let payload = take(&mut r, n * elem, "payload")?.to_vec();
        tensors.push(StoredTensor { name, dtype, dims, payload });
    }
    let mlen = u32_at(&mut r, "metadata length")? as usize;
    let meta = serde_json::from_slice(take(&mut r, mlen, "metadata")?)?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after metadata", r.len())));
    }
    Ok((tensors, meta))
}

pub fn save<T: Element>(path: &Path, net: &NetworkInstance<T>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(&net.state(), meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Vec<StoredTensor>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Copies stored tensors into `net`; every network tensor must be present with its shape.
pub fn restore<T: Element>(net: &mut NetworkInstance<T>, tensors: &[StoredTensor]) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &StoredTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, dst) in net.state_mut() {
        let src = by_name.remove(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        let t = src.to_tensor::<T>()?;
        if t.shape() != dst.shape() {
            return Err(Error::Format(format!("tensor {name}: stored {} vs network {}", t.shape(), dst.shape())));
        }
        *dst = t;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(())
}

/// Rebuilds the network recorded in a checkpoint and loads its tensors.
pub fn load_network<T: Element>(path: &Path) -> Result<(NetworkInstance<T>, CheckpointMeta)> {
    let (tensors, meta) = read(path)?;
    let mut net = NetworkInstance::build(&meta.spec, 0)?;
    restore(&mut net, &tensors)?;
    Ok((net, meta))
}
