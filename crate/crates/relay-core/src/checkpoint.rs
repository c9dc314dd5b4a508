//! Shared checkpoint format.
//!
//! Layout: magic "RDCKPT", u32 format version, u32 config length + canonical
//! JSON bytes, u32 tensor count, then per tensor: u32 name length, name
//! bytes, u32 rank, u32 dims, little-endian f32 payload. Round trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"RDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// serde_json maps sort keys, so serializing a Value is canonical.
pub fn canonical_json(v: &serde_json::Value) -> String {
    serde_json::to_string(v).expect("json value serializes")
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, FORMAT_VERSION)?;
    let config = canonical_json(&ckpt.config);
    write_u32(&mut buf, config.len() as u32)?;
    buf.extend_from_slice(config.as_bytes());
    write_u32(&mut buf, ckpt.tensors.len() as u32)?;
    for (name, tensor) in &ckpt.tensors {
        write_u32(&mut buf, name.len() as u32)?;
        buf.extend_from_slice(name.as_bytes());
        write_u32(&mut buf, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut buf, d as u32)?;
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{} is too short for a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} unsupported (this build reads {FORMAT_VERSION})"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: serde_json::Value = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Format(format!("checkpoint config is not valid JSON: {e}")))?;
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut fb = [0u8; 4];
            r.read_exact(&mut fb)?;
            data.push(f32::from_le_bytes(fb));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}

/// Snapshot named parameters out of a store, in the given order.
pub fn tensors_from_store(
    store: &ParamStore<f32>,
    named: &[(String, crate::params::ParamId)],
) -> Vec<(String, Tensor<f32>)> {
    named
        .iter()
        .map(|(name, id)| (name.clone(), store.value(*id).clone()))
        .collect()
}
