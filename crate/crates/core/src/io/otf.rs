//! Tensor file format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "OTF1"
//! 4       1           dtype (0 = float32)
//! 5       1           ndim
//! 6       4 * ndim    shape, u32 little-endian each
//! 6+4n    4 * prod    payload, row-major little-endian float32
//! ```
//!
//! The file ends exactly after the payload. A zero-sized dimension gives a
//! valid empty tensor.

use std::path::Path;

use crate::alignment::TextEmbedding;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 4] = b"OTF1";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// What a tensor holds, judged by its rank.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorRole {
    /// rank 1: a text embedding
    Embedding(Vec<f32>),
    /// rank 2: a depth map or similarity map
    Map(DepthMap),
    /// rank 3: an `H x W x C` feature map
    Features(FeatureMap),
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::validation(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn role(self) -> Result<TensorRole> {
        match self.shape.len() {
            1 => Ok(TensorRole::Embedding(self.data)),
            2 => Ok(TensorRole::Map(DepthMap::new(self.shape[0], self.shape[1], self.data)?)),
            3 => Ok(TensorRole::Features(FeatureMap::new(
                self.shape[0],
                self.shape[1],
                self.shape[2],
                self.data,
            )?)),
            r => Err(Error::format(5, format!("rank {r} tensor has no role"))),
        }
    }

    pub fn into_feature_map(self) -> Result<FeatureMap> {
        match self.role()? {
            TensorRole::Features(f) => Ok(f),
            _ => Err(Error::format(5, "expected a rank-3 feature tensor")),
        }
    }

    pub fn into_depth_map(self) -> Result<DepthMap> {
        match self.role()? {
            TensorRole::Map(m) => Ok(m),
            _ => Err(Error::format(5, "expected a rank-2 map tensor")),
        }
    }

    pub fn into_embedding(self, prompt: &str) -> Result<TextEmbedding> {
        match self.role()? {
            TensorRole::Embedding(v) => TextEmbedding::new(prompt, v),
            _ => Err(Error::format(5, "expected a rank-1 embedding tensor")),
        }
    }
}

pub fn encode(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::validation(format!(
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        )));
    }
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::validation("too many dimensions"))?;
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(ndim);
    for &s in shape {
        let s = u32::try_from(s).map_err(|_| Error::validation(format!("dimension {s} exceeds u32")))?;
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = *bytes.get(4).ok_or_else(|| Error::format(4, "truncated header: missing dtype"))?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(4, format!("unsupported dtype code {dtype}")));
    }
    let ndim = *bytes.get(5).ok_or_else(|| Error::format(5, "truncated header: missing ndim"))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 6 + 4 * i;
        let raw = bytes
            .get(at..at + 4)
            .ok_or_else(|| Error::format(at as u64, format!("truncated shape entry {i}")))?;
        shape.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 6 + 4 * ndim;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::format(6, "shape product overflows"))?;
    let needed = count
        .checked_mul(4)
        .ok_or_else(|| Error::format(6, "payload size overflows"))?;
    let payload = &bytes[start..];
    if payload.len() < needed {
        return Err(Error::format(
            (start + payload.len()) as u64,
            format!(
                "truncated payload starting at offset {start}: expected {needed} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(
            (start + needed) as u64,
            format!("{} trailing bytes after payload", payload.len() - needed),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_otf(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(shape, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_otf(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}
