//! Binary checkpoint: `MOBL`, a little-endian u16 version, a u32 length,
//! that many bytes of JSON metadata, then every parameter as little-endian
//! f32 in manifest order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MOBL";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported format version {version} at offset 4")]
    Version { version: u16 },
    #[error("file truncated at offset {offset}: {needed} more bytes expected")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid metadata at offset {offset}: {detail}")]
    Metadata { offset: usize, detail: String },
    #[error("{extra} trailing bytes at offset {offset}")]
    Trailing { offset: usize, extra: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Everything stored next to the weights. It holds no timestamps or paths,
/// so two identical trainings write identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub epoch_losses: Vec<f64>,
    pub creator: String,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

pub fn creator_stamp() -> String {
    format!("moble {}", env!("CARGO_PKG_VERSION"))
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64, train: Option<TrainConfig>, epoch_losses: Vec<f64>) -> Self {
        let mut offset = 0;
        let manifest = params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_owned(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * 4;
                e
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                model: params.config().clone(),
                seed,
                train,
                epoch_losses,
                creator: creator_stamp(),
                manifest,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(meta.len()).map_err(|_| CheckpointError::Metadata {
            offset: 6,
            detail: "metadata larger than 4 GiB".into(),
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + self.params.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |offset: usize, n: usize| -> Result<&[u8], CheckpointError> {
            bytes.get(offset..offset + n).ok_or_else(|| CheckpointError::Truncated {
                offset: bytes.len(),
                needed: offset + n - bytes.len(),
            })
        };
        if need(0, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u16::from_le_bytes(need(4, 2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { version }.into());
        }
        let meta_len = u32::from_le_bytes(need(6, 4)?.try_into().expect("4 bytes")) as usize;
        let meta_bytes = need(HEADER_LEN, meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata {
            offset: HEADER_LEN + e.column().saturating_sub(1),
            detail: e.to_string(),
        })?;
        let bad_meta = |detail: String| CheckpointError::Metadata {
            offset: HEADER_LEN,
            detail,
        };
        meta.model.validate().map_err(|e| bad_meta(e.to_string()))?;
        let payload_start = HEADER_LEN + meta_len;
        let mut tensors = IndexMap::with_capacity(meta.manifest.len());
        let mut expected = 0;
        for e in &meta.manifest {
            if e.offset != expected {
                return Err(bad_meta(format!("manifest entry {} is not contiguous", e.name)).into());
            }
            let n: usize = e.shape.iter().product();
            let raw = need(payload_start + e.offset, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected += n * 4;
        }
        let end = payload_start + expected;
        if bytes.len() > end {
            return Err(CheckpointError::Trailing {
                offset: end,
                extra: bytes.len() - end,
            }
            .into());
        }
        let params = ModelParams::from_tensors(meta.model.clone(), tensors)
            .map_err(|e| bad_meta(e.to_string()))?;
        Ok(Self { meta, params })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::init_model;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        };
        Checkpoint::new(init_model(&cfg, 4).unwrap(), 4, Some(TrainConfig::default()), vec![4.1, 0.2])
    }

    #[test]
    fn byte_exact_roundtrip() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mobl");
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn truncation_and_corruption_fail_closed() {
        let bytes = ckpt().to_bytes().unwrap();
        for cut in [0, 3, 5, 9, 40, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => {}
                Err(Error::Checkpoint(CheckpointError::BadMagic)) if cut < 4 => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::Version { version: 9 }))
        ));
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = b'!';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::Metadata { .. }))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(Error::Checkpoint(CheckpointError::Trailing { .. }))
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = ckpt().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Metadata { .. }))
        ));
    }
}
