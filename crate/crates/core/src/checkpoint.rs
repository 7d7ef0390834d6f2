//! Binary checkpoints: a JSON header followed by named little-endian f32
//! tensors.
//!
//! Layout: magic `BCKP`, u32 format version, u32 header length, header JSON,
//! u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 rows,
//! u32 cols, `rows * cols` f32 values in row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::params::ParamSet;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BCKP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Stage-1 output: the code encoder alone.
    Encoder,
    /// Encoder plus, unless retrieval-only, fusion and decoder.
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    pub decoder: Option<DecoderConfig>,
    pub fusion: Option<FusionKind>,
    pub code_vocab_hash: String,
    pub comment_vocab_hash: String,
    /// Free-form settings owned by the caller (ablation, retrieval top-k).
    #[serde(default)]
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Mat)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Collects every tensor of `sets`, in order.
    pub fn new(header: CheckpointHeader, sets: &[&ParamSet]) -> Self {
        let tensors = sets
            .iter()
            .flat_map(|s| s.iter().map(|p| (p.name.clone(), p.value.clone())))
            .collect();
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for &v in m.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.take(rows * cols * 4)?;
            let values = data
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, Mat::from_shape_vec((rows, cols), values).unwrap()));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?).map_err(|e| corrupt(e.to_string()))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| corrupt(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every tensor of `set` with the stored tensor of the same
    /// name and shape.
    pub fn restore(&self, set: &mut ParamSet) -> Result<()> {
        let by_name: HashMap<&str, &Mat> = self.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        for p in set.iter_mut() {
            let m = by_name
                .get(p.name.as_str())
                .ok_or_else(|| corrupt(format!("missing tensor {}", p.name)))?;
            if m.dim() != p.value.dim() {
                return Err(corrupt(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    m.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(m);
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
