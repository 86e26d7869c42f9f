//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (experiment config, its hash, tensor index), then every tensor's
//! values as little-endian `f32`, in index order. All integers are
//! little-endian.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use p2d_core::model::Model;
use p2d_core::params::ParamStore;

use crate::config::ExperimentConfig;
use crate::error::{Result, RunError};

pub const MAGIC: [u8; 8] = *b"P2DCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: Model<f32>) -> Result<Self> {
        if model.config != config.model || model.mode != config.mode {
            return Err(RunError::Checkpoint("model does not match the experiment config".into()));
        }
        Ok(Self { config, model })
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            for &x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RunError::Checkpoint(m.to_string());
        if bytes.len() < PREAMBLE {
            return Err(bad("truncated preamble"));
        }
        if bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(RunError::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[PREAMBLE..];
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|&n| n <= rest.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        if header.config.hash() != header.config_hash {
            return Err(RunError::ConfigMismatch {
                expected: header.config.hash(),
                found: header.config_hash,
            });
        }
        header.config.validate()?;

        let mut data = &rest[header_len..];
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let len = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let nbytes = len.checked_mul(4).filter(|&n| n <= data.len()).ok_or_else(|| bad("truncated tensor data"))?;
            let values = data[..nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[nbytes..];
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(&e.to_string()))?;
            params.insert(entry.name.clone(), array);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if params.len() != header.tensors.len() {
            return Err(bad("duplicate tensor names"));
        }
        let model = Model::from_params(header.config.model.clone(), header.config.mode, params)?;
        Ok(Self {
            config: header.config,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint and insists its config hash equals `expected`'s.
    pub fn load_matching(path: &Path, expected: &ExperimentConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (want, got) = (expected.hash(), ckpt.hash());
        if want != got {
            return Err(RunError::ConfigMismatch {
                expected: want,
                found: got,
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut config = ExperimentConfig::default();
        config.model.feature_channels = 4;
        config.model.encoder_hidden = vec![4];
        config.model.head_hidden = 4;
        config.model.k = 8;
        let model = Model::new(config.model.clone(), config.mode, 3).unwrap();
        Checkpoint::new(config, model).unwrap()
    }

    #[test]
    fn bytes_round_trip_bit_identically() {
        let ckpt = small();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((a, x), (b, y)) in ckpt.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a, b);
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] ^= 1;
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
