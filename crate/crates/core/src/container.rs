//! Binary checkpoint container shared by the denoiser and the segmentation
//! models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"DFBCKPT\0"
//! version  u32
//! hlen     u64      length of the header
//! header   hlen     UTF-8 JSON, keys sorted: kind, meta, tensors, payload_sha256
//! payload           f32 values of every tensor, in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamBlock;

const MAGIC: &[u8; 8] = b"DFBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<ParamBlock>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let expected: usize = b.shape.iter().product();
            if expected != b.data.len() {
                return Err(Error::Checkpoint(format!(
                    "block {} has {} values for shape {:?}",
                    b.name,
                    b.data.len(),
                    b.shape
                )));
            }
            tensors.push(TensorEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
                offset: payload.len(),
                len: b.data.len(),
            });
            for v in &b.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            // round-trip through Value so object keys come out sorted
            meta: serde_json::to_value(&self.meta)?,
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&serde_json::to_value(&header)?)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt container: {what}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut blocks = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let end = t.offset + t.len * 4;
            if end > payload.len() || t.shape.iter().product::<usize>() != t.len {
                return Err(corrupt(&format!("tensor {} out of bounds", t.name)));
            }
            let data = payload[t.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(ParamBlock {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            blocks,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 0..40), tag in "[a-z]{1,8}") {
            let c = Container {
                kind: tag,
                meta: serde_json::json!({"z": 1, "a": [1.5, 2.0]}),
                blocks: vec![ParamBlock { name: "w".into(), shape: vec![values.len()], data: values.clone() }],
            };
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let got: Vec<u32> = back.blocks[0].data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.meta, c.meta);
        }
    }

    #[test]
    fn detects_corruption() {
        let c = Container {
            kind: "x".into(),
            meta: serde_json::json!({}),
            blocks: vec![ParamBlock {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, 2.0],
            }],
        };
        let mut bytes = c.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Container::from_bytes(b"garbage").is_err());
    }
}
