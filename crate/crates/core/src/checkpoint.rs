//! Model checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ENGCKPT1"            8-byte magic
//! header_len: u32        length of the JSON header in bytes
//! header: [u8]           UTF-8 JSON (`CheckpointHeader`)
//! tensors: [f32]         concatenated in the order of `header.tensors`
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBackendSpec, Pooling};
use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};

pub const MAGIC: &[u8; 8] = b"ENGCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `engagement`, `relevance` or `birnn`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub layer_widths: Vec<usize>,
    pub pooling: Option<Pooling>,
    pub backend_id: String,
    pub backend: EmbeddingBackendSpec,
    pub seed: u64,
    pub training_fingerprint: String,
    /// Model-specific settings.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.tensors.len() != self.data.len() {
            return Err(Error::Checkpoint("tensor table does not match payload".into()));
        }
        for (info, d) in self.header.tensors.iter().zip(&self.data) {
            if info.numel() != d.len() {
                return Err(Error::Checkpoint(format!("tensor {} has {} values, shape says {}", info.name, d.len(), info.numel())));
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + self.data.iter().map(|d| d.len() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut offset = 12 + hlen;
        let mut data = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let len = info.numel() * 4;
            let raw = bytes
                .get(offset..offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", info.name)))?;
            data.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
            offset += len;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<(&TensorInfo, &[f32])> {
        self.header
            .tensors
            .iter()
            .zip(&self.data)
            .find(|(i, _)| i.name == name)
            .map(|(i, d)| (i, d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)))
        }
    }
}

/// Appends one dense layer as `{name}.weight` / `{name}.bias`.
pub fn push_dense(name: &str, layer: &Dense, infos: &mut Vec<TensorInfo>, data: &mut Vec<Vec<f32>>) {
    infos.push(TensorInfo { name: format!("{name}.weight"), shape: vec![layer.out_dim, layer.in_dim] });
    data.push(layer.weights.iter().map(|&v| v as f32).collect());
    infos.push(TensorInfo { name: format!("{name}.bias"), shape: vec![layer.out_dim] });
    data.push(layer.bias.iter().map(|&v| v as f32).collect());
}

pub fn read_dense(name: &str, in_dim: usize, out_dim: usize, ckpt: &Checkpoint) -> Result<Dense> {
    let (wi, wd) = ckpt.tensor(&format!("{name}.weight"))?;
    let (bi, bd) = ckpt.tensor(&format!("{name}.bias"))?;
    if wi.shape != [out_dim, in_dim] || bi.shape != [out_dim] {
        return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected [{out_dim}, {in_dim}]", wi.shape)));
    }
    Ok(Dense {
        in_dim,
        out_dim,
        weights: wd.iter().map(|&v| f64::from(v)).collect(),
        bias: bd.iter().map(|&v| f64::from(v)).collect(),
    })
}

/// Appends an MLP's layers as `{prefix}{i}.weight` / `{prefix}{i}.bias`.
pub fn push_mlp(prefix: &str, mlp: &Mlp, infos: &mut Vec<TensorInfo>, data: &mut Vec<Vec<f32>>) {
    for (i, l) in mlp.layers.iter().enumerate() {
        push_dense(&format!("{prefix}{i}"), l, infos, data);
    }
}

pub fn read_mlp(prefix: &str, widths: &[usize], ckpt: &Checkpoint) -> Result<Mlp> {
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| read_dense(&format!("{prefix}{i}"), w[0], w[1], ckpt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mlp { layers })
}
