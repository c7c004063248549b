//! Flat tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 0..4         | magic `CPNT`                                         |
//! | 4..8         | format version (`u32`, currently 1)                  |
//! | 8..16        | header length `h` in bytes (`u64`)                   |
//! | 16..16+h     | UTF-8 JSON header                                    |
//! | 16+h..       | payload: every tensor's data as raw `f64` LE values  |
//!
//! The header is `{"meta": <any>, "tensors": [{"name", "shape", "offset",
//! "len"}]}` with `offset` and `len` counted in `f64` elements from the start
//! of the payload. Tensors are stored in the order given, so writing the same
//! container twice yields identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"CPNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let mut offset = 0;
    let entries = c
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: c.meta.clone(),
        tensors: entries,
    })
    .map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &c.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing CPNT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(TensorError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| TensorError::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| TensorError::Format(e.to_string()))?;
    let payload = &bytes[body..];
    if !payload.len().is_multiple_of(8) {
        return Err(TensorError::Format("payload is not a whole number of f64".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let end = e.offset + e.len;
        if end * 8 > payload.len() {
            return Err(TensorError::Format(format!("tensor `{}` runs past the payload", e.name)));
        }
        let data = payload[e.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode_container(c)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode_container(&fs::read(path)?)
}
