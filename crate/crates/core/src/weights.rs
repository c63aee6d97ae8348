//! Weight file format.
//!
//! ```text
//! "RWKVSPEC1"                 9 bytes
//! header length               u64, little endian
//! header                      JSON: config + tensor manifest
//! payload                     little-endian f64, tensors at manifest offsets
//! ```
//!
//! Manifest offsets are relative to the start of the payload. Scalars are
//! always stored as f64, so f32 models round-trip exactly too.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 9] = b"RWKVSPEC1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for t in model.params.tensors() {
        let offset = payload.len() as u64;
        for &x in t.data {
            payload.extend_from_slice(&x.f64().to_le_bytes());
        }
        entries.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        config: model.config,
        dtype: "f64".into(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Splits a file into its parsed header and payload bytes.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let magic_len = MAGIC.len();
    if bytes.len() < magic_len {
        return if MAGIC.starts_with(bytes) {
            Err(Error::Truncated {
                needed: magic_len as u64,
                available: bytes.len() as u64,
            })
        } else {
            Err(Error::BadMagic)
        };
    }
    if &bytes[..magic_len] != MAGIC {
        return Err(Error::BadMagic);
    }
    let fixed = magic_len + 8;
    if bytes.len() < fixed {
        return Err(Error::Truncated {
            needed: fixed as u64,
            available: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[magic_len..fixed].try_into().expect("8 bytes"));
    let header_end = (fixed as u64).saturating_add(header_len);
    if header_end > bytes.len() as u64 {
        return Err(Error::Truncated {
            needed: header_end,
            available: bytes.len() as u64,
        });
    }
    let header_end = header_end as usize;
    let header: Header = serde_json::from_slice(&bytes[fixed..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload) = read_header(bytes)?;
    if header.dtype != "f64" {
        return Err(Error::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let cfg = header.config;
    cfg.validate()?;
    let expected = Parameters::<T>::expected_shapes(&cfg);
    if header.tensors.len() != expected.len() {
        return Err(Error::WeightShape {
            name: "<manifest>".into(),
            detail: format!(
                "{} tensors listed, config implies {}",
                header.tensors.len(),
                expected.len()
            ),
        });
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if entry.name != *name {
            return Err(Error::WeightShape {
                name: entry.name.clone(),
                detail: format!("expected tensor {name} at this position"),
            });
        }
        let want_bytes = shape.iter().product::<usize>() as u64 * 8;
        if entry.shape != *shape || entry.nbytes != want_bytes {
            return Err(Error::WeightShape {
                name: name.clone(),
                detail: format!(
                    "header says {:?} / {} bytes, config implies {:?} / {} bytes",
                    entry.shape, entry.nbytes, shape, want_bytes
                ),
            });
        }
        let end = entry.offset.saturating_add(entry.nbytes);
        if end > payload.len() as u64 {
            return Err(Error::Truncated {
                needed: end,
                available: payload.len() as u64,
            });
        }
    }

    let mut params = Parameters::<T>::zeros(&cfg);
    for (entry, t) in header.tensors.iter().zip(params.tensors_mut()) {
        let raw = &payload[entry.offset as usize..(entry.offset + entry.nbytes) as usize];
        for (dst, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    Model::new(cfg, params)
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
