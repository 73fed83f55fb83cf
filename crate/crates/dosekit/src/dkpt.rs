//! `.dkpt`: model checkpoint.
//!
//! Layout: magic `DKPT`, `u16` LE version, `u32` LE header length, a JSON
//! header (configuration, kernel, tensor table, optimizer summary,
//! training metadata), then every tensor as `f32` LE in table order. When
//! optimizer state is present, the first moments of all tensors follow,
//! then the second moments, in the same order.

use std::path::Path;

use dosekit_core::nn::{AdamState, ModelParameters, ParamTensor, UNetConfig};
use dosekit_core::trainer::{ModelCheckpoint, TrainingMeta};
use dosekit_core::volume::KernelSpec;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, KitError, KitResult};
use crate::fsutil;

pub const MAGIC: [u8; 4] = *b"DKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub lr: f64,
    pub first_moment_offset: usize,
    pub second_moment_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: UNetConfig,
    pub kernel: KernelSpec,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub meta: Option<TrainingMeta>,
}

pub fn encode(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let mut offset = 0;
    let tensors: Vec<TensorEntry> = p
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            };
            offset += t.data.len();
            e
        })
        .collect();
    let total = offset;
    let header = Header {
        config: p.config,
        kernel: p.kernel,
        tensors,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerEntry {
            step: o.step,
            lr: o.lr,
            first_moment_offset: total,
            second_moment_offset: 2 * total,
        }),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * total * 3);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vs: &[f32]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    p.tensors.iter().for_each(|t| put(&t.data));
    if let Some(o) = &ckpt.optimizer {
        o.m.iter().for_each(|m| put(m));
        o.v.iter().for_each(|v| put(v));
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelCheckpoint, FormatError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 10 {
        return Err(FormatError::Truncated {
            needed: 10,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[10..];
    if body.len() < hlen {
        return Err(FormatError::Truncated {
            needed: 10 + hlen,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &body[hlen..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let blocks = if header.optimizer.is_some() { 3 } else { 1 };
    let expected = 4 * total * blocks;
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            needed: 10 + hlen + expected,
            found: bytes.len(),
        });
    }
    if payload.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let slice = |base: usize, e: &TensorEntry| -> Result<Vec<f32>, FormatError> {
        floats
            .get(base + e.offset..base + e.offset + e.len)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| FormatError::Header(format!("tensor `{}` lies outside the payload", e.name)))
    };
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            Ok(ParamTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: slice(0, e)?,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let params = ModelParameters::from_tensors(header.config, header.kernel, tensors)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => Some(AdamState {
            m: header
                .tensors
                .iter()
                .map(|e| slice(o.first_moment_offset, e))
                .collect::<Result<_, _>>()?,
            v: header
                .tensors
                .iter()
                .map(|e| slice(o.second_moment_offset, e))
                .collect::<Result<_, _>>()?,
            step: o.step,
            lr: o.lr,
        }),
    };
    Ok(ModelCheckpoint {
        params,
        optimizer,
        meta: header.meta,
    })
}

pub fn write(path: &Path, ckpt: &ModelCheckpoint) -> KitResult<()> {
    fsutil::write_atomic(path, &encode(ckpt))
}

pub fn read(path: &Path) -> KitResult<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| KitError::io(path, e))?;
    decode(&bytes).map_err(|e| KitError::format(path, e))
}
