//! The TQCK checkpoint container.
//!
//! Layout (little-endian): magic `TQCK`, `u32` version, `u8` weight encoding,
//! `u32` length + JSON [`NetConfig`], `u64` parameter count + payload, then
//! `u32` length + JSON block with the per-layer quantisation schemes and the
//! activation calibrators, then `u32` length + JSON provenance (any value,
//! `null` when absent). With the f64 encoding every parameter tensor is
//! stored raw in declaration order. The int8 encoding stores convolution
//! weights as per-channel int8 codes (their scales live in the scheme block)
//! and everything else as f64.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{quantize_code, QuantScheme, RangeCalibrator};
use crate::volume_io::write_atomic;

use super::net::{Net, NetConfig, NetError};

pub const MAGIC: &[u8; 4] = b"TQCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown weight encoding {0}")]
    UnknownEncoding(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed JSON block: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightEncoding {
    F64,
    Int8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchemes {
    pub weight: QuantScheme,
    pub activation: QuantScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantBlock {
    layers: Vec<LayerSchemes>,
    calibrators: Vec<RangeCalibrator>,
}

/// Schemes the network would use at inference, one entry per convolution.
pub fn layer_schemes(net: &Net) -> Vec<LayerSchemes> {
    net.layout()
        .iter()
        .enumerate()
        .map(|(l, lp)| LayerSchemes {
            weight: QuantScheme::for_weights(&net.params[lp.weight], net.config.widths[l], net.config.weight_granularity),
            activation: net.calibrators[l].finalize(),
        })
        .collect()
}

pub fn encode_checkpoint(net: &Net, encoding: WeightEncoding) -> Vec<u8> {
    encode_checkpoint_with_meta(net, encoding, &serde_json::Value::Null)
}

/// Encode with a provenance document, typically the resolved run config.
pub fn encode_checkpoint_with_meta(net: &Net, encoding: WeightEncoding, meta: &serde_json::Value) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match encoding {
        WeightEncoding::F64 => 0,
        WeightEncoding::Int8 => 1,
    });
    let config = serde_json::to_vec(&net.config).expect("config serialises");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let schemes = layer_schemes(net);
    let weight_slots: Vec<Option<usize>> = (0..net.params.len())
        .map(|i| net.layout().iter().position(|lp| lp.weight == i))
        .collect();
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for (i, p) in net.params.iter().enumerate() {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        match (encoding, weight_slots[i]) {
            (WeightEncoding::Int8, Some(l)) => {
                let s = &schemes[l].weight;
                out.extend(p.iter().enumerate().map(|(j, &w)| quantize_code(w, s.scale_at(j, p.len())) as i8 as u8));
            }
            _ => p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let block = serde_json::to_vec(&QuantBlock {
        layers: schemes,
        calibrators: net.calibrators.clone(),
    })
    .expect("schemes serialise");
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    let meta = serde_json::to_vec(meta).expect("JSON value serialises");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Net, CheckpointError> {
    Ok(decode_checkpoint_with_meta(bytes)?.0)
}

pub fn decode_checkpoint_with_meta(bytes: &[u8]) -> Result<(Net, serde_json::Value), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let encoding = match r.take(1)?[0] {
        0 => WeightEncoding::F64,
        1 => WeightEncoding::Int8,
        other => return Err(CheckpointError::UnknownEncoding(other)),
    };
    let len = r.u32()? as usize;
    let config: NetConfig = serde_json::from_slice(r.take(len)?)?;
    let template = Net::new(config.clone())?;
    let count = r.u64()? as usize;
    if count != template.params.len() {
        return Err(NetError::InvalidConfig("parameter count does not match config".into()).into());
    }
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let n = r.u64()? as usize;
        let is_weight = template.layout().iter().any(|lp| lp.weight == i);
        let elem = if encoding == WeightEncoding::Int8 && is_weight { 1 } else { 8 };
        raw.push((is_weight, n, r.take(n.checked_mul(elem).ok_or(CheckpointError::Truncated)?)?));
    }
    let len = r.u32()? as usize;
    let block: QuantBlock = serde_json::from_slice(r.take(len)?)?;
    let len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(len)?)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut params = Vec::with_capacity(count);
    for (i, (is_weight, n, data)) in raw.into_iter().enumerate() {
        if encoding == WeightEncoding::Int8 && is_weight {
            let l = template.layout().iter().position(|lp| lp.weight == i).unwrap();
            let s = &block.layers[l].weight;
            params.push(data.iter().enumerate().map(|(j, &b)| (b as i8) as f64 * s.scale_at(j, n)).collect());
        } else {
            params.push(data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
    }
    Ok((Net::from_parts(config, params, block.calibrators)?, meta))
}

/// Atomically write a checkpoint; returns its size in bytes.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Net,
    encoding: WeightEncoding,
    meta: &serde_json::Value,
) -> Result<u64, CheckpointError> {
    let bytes = encode_checkpoint_with_meta(net, encoding, meta);
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Net, serde_json::Value), CheckpointError> {
    decode_checkpoint_with_meta(&std::fs::read(path)?)
}
