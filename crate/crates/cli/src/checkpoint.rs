//! Model checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "SSFD" | version u16 | records... | crc32 u32
//! One record per parameter, in name order:
//!   name_len u32 | name utf-8 | rank u32 | dims u32 * rank | payload f64-le
//! The trailing CRC32 covers every preceding byte; `load` verifies it, so
//! silent truncation of the float payload is detected.

use std::path::Path;

use anyhow::{bail, Context, Result};

use roadseg_core::segnet::{ModelParams, NetConfig};
use roadseg_core::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSFD";
pub const VERSION: u16 = 1;

/// Serialize parameters to checkpoint bytes.
pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse checkpoint bytes, verifying magic, version, and CRC.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 2 + 4 {
        bail!("checkpoint too short ({} bytes)", bytes.len());
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        bail!("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}");
    }
    if body[..4] != MAGIC {
        bail!("bad checkpoint magic");
    }
    let version = u16::from_le_bytes(body[4..6].try_into().expect("2 bytes"));
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let mut params = ModelParams::default();
    let mut cursor = 6usize;
    let read_u32 = |buf: &[u8], at: usize| -> Result<u32> {
        let end = at.checked_add(4).context("checkpoint record overflow")?;
        if end > buf.len() {
            bail!("truncated checkpoint record");
        }
        Ok(u32::from_le_bytes(buf[at..end].try_into().expect("4 bytes")))
    };
    while cursor < body.len() {
        let name_len = read_u32(body, cursor)? as usize;
        cursor += 4;
        if cursor + name_len > body.len() {
            bail!("truncated parameter name");
        }
        let name = std::str::from_utf8(&body[cursor..cursor + name_len])
            .context("parameter name is not UTF-8")?
            .to_string();
        cursor += name_len;
        let rank = read_u32(body, cursor)? as usize;
        cursor += 4;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(body, cursor)? as usize);
            cursor += 4;
        }
        let numel: usize = shape.iter().product();
        let byte_len = numel * 8;
        if cursor + byte_len > body.len() {
            bail!("truncated payload for '{name}'");
        }
        let data: Vec<f64> = body[cursor..cursor + byte_len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor += byte_len;
        params.insert(
            name,
            Tensor::new(shape, data).map_err(|e| anyhow::anyhow!("{e}"))?,
        );
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, to_bytes(params))
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
}

/// Reject checkpoints whose parameter names or shapes differ from what the
/// given architecture expects.
pub fn check_matches_config(params: &ModelParams, net: &NetConfig) -> Result<()> {
    let expected = net.param_layout();
    if params.len() != expected.len() {
        bail!(
            "checkpoint/config mismatch: {} parameters in file, {} expected",
            params.len(),
            expected.len()
        );
    }
    for (name, shape) in &expected {
        let tensor = params
            .get(name)
            .map_err(|_| anyhow::anyhow!("checkpoint/config mismatch: missing '{name}'"))?;
        if tensor.shape() != shape.as_slice() {
            bail!(
                "checkpoint/config mismatch: '{name}' has shape {:?}, expected {shape:?}",
                tensor.shape()
            );
        }
    }
    Ok(())
}
