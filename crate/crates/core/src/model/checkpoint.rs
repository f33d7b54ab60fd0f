//! Binary checkpoint layout:
//!
//! ```text
//! "CSEG" | version: u32 LE | header length: u32 LE | JSON header | f32 LE payloads
//! ```
//!
//! The header lists every tensor name and shape; payloads follow in header order.

use super::{Param, UNet, UNetConfig};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    threshold: Option<f64>,
}

/// A serialised model plus training metadata and an optional calibrated threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub threshold: Option<f64>,
}

impl Checkpoint {
    pub fn new<T: Float>(model: &UNet<T>) -> Self {
        Checkpoint {
            model: model.cast(),
            metadata: BTreeMap::new(),
            threshold: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            tensors: self
                .model
                .params()
                .iter()
                .map(|p| TensorInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
            threshold: self.threshold,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.model.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 12 {
            return Err(fail("file too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if header_len > body.len() {
            return Err(fail("header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| fail(&format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| fail(&format!("config: {e}")))?;
        let payload = &body[header_len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| 4 * t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(fail(&format!(
                "payload is {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut chunks = payload.chunks_exact(4);
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let data: Vec<f32> = chunks
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Param {
                name: info.name,
                value: Tensor::new(&info.shape, data).map_err(|e| fail(&e.to_string()))?,
            });
        }
        Ok(Checkpoint {
            model: UNet::from_params(header.config, params)?,
            metadata: header.metadata,
            threshold: header.threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(&UNet::<f32>::build(UNetConfig::small(2, 3), 4).unwrap());
        ck.metadata.insert("epochs".into(), 3.into());
        ck.threshold = Some(0.85);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.model.params().iter().zip(ck.model.params()) {
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Format(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..40]), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path().join("nope.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
