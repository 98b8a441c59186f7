//! `GRIDOOD1` checkpoint container.
//!
//! Layout:
//!
//! | bytes            | content                                            |
//! |------------------|----------------------------------------------------|
//! | 8                | magic `GRIDOOD1`                                   |
//! | 8                | header length `n`, little-endian `u64`             |
//! | n                | UTF-8 JSON header                                  |
//! | rest             | little-endian `f64` payloads in directory order    |
//!
//! Directory offsets are byte offsets from the start of the payload area.

use std::fs;
use std::path::Path;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::net::{NetworkConfig, Params};

pub const MAGIC: &[u8; 8] = b"GRIDOOD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Candidate-grid heads trained with the objectness/class loss.
    Yolood,
    /// Pooled linear classifier trained with multi-label BCE.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub mode: Mode,
    pub epoch: usize,
    pub seed: u64,
    pub p: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Params,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: NetworkConfig,
    meta: TrainingMeta,
    tensors: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = DirEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated("missing magic".into()).into());
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CheckpointError::Truncated("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| CheckpointError::Truncated("header cut short".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: header.version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let expected = header.config.param_shapes();
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::Header(format!(
                "{} tensors stored, config defines {}",
                header.tensors.len(),
                expected.len()
            ))
            .into());
        }
        let payload = &bytes[16 + header_len..];
        let mut entries = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.into_iter().zip(&header.tensors) {
            if entry.name != name {
                return Err(CheckpointError::Header(format!("expected tensor `{name}`, found `{}`", entry.name)).into());
            }
            if entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: entry.shape.clone(),
                    expected: shape,
                }
                .into());
            }
            let numel: usize = shape.iter().product();
            let start = entry.offset as usize;
            let raw = payload
                .get(start..start + 8 * numel)
                .ok_or_else(|| CheckpointError::Truncated(format!("payload of `{name}` cut short")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            params: Params::from_entries(entries),
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;

    fn sample() -> Checkpoint {
        let net = Network::init(NetworkConfig::new(64, 4), 5).unwrap();
        Checkpoint {
            config: net.config,
            params: net.params,
            meta: TrainingMeta {
                mode: Mode::Yolood,
                epoch: 3,
                seed: 42,
                p: [0.0, 0.1, 0.5],
            },
        }
    }

    fn checkpoint_err(r: Result<Checkpoint>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.starts_with(MAGIC));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_err(Checkpoint::from_bytes(&bytes[..cut])), CheckpointError::Truncated(_)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn edited_class_count_fails_shape_validation() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = "\"num_classes\":4";
        let pos = text.find(needle).expect("header contains num_classes");
        let mut edited = bytes.clone();
        edited[pos + needle.len() - 1] = b'5';
        let err = checkpoint_err(Checkpoint::from_bytes(&edited));
        assert!(matches!(err, CheckpointError::ShapeMismatch { ref name, .. } if name == "head1.out.kernel"), "{err:?}");
    }

    #[test]
    fn version_and_magic_are_checked() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("\"version\":1").unwrap();
        let mut edited = bytes.clone();
        edited[pos + "\"version\":".len()] = b'7';
        assert_eq!(
            checkpoint_err(Checkpoint::from_bytes(&edited)),
            CheckpointError::VersionMismatch { found: 7, expected: 1 }
        );
        let mut bad = bytes;
        bad[0] = b'X';
        assert_eq!(checkpoint_err(Checkpoint::from_bytes(&bad)), CheckpointError::BadMagic);
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gridood");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
