//! Single-file model checkpoints.
//!
//! Layout: magic `RETL`, format version (`u16` LE), header length (`u64` LE),
//! a JSON header, then the tensor blocks back to back. The header carries the
//! run config, optimizer scalars and a manifest giving each block's name,
//! shape, offset (from the start of the block section) and byte length.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::CoarseModel;
use crate::error::{Error, Result};
use crate::fine::FineModel;
use crate::scene::io::write_atomic;
use crate::tensor::{block_len, read_block, write_block, ParamSet, Tensor};

use super::config::Config;
use super::optim::Adam;

pub const MAGIC: &[u8; 4] = b"RETL";
pub const VERSION: u16 = 1;

const OPT_M: &str = "optim.m/";
const OPT_V: &str = "optim.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("manifest disagrees with payload: {0}")]
    Manifest(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad checkpoint header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Config,
    optimizer: Option<OptimizerMeta>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `coarse` or `fine`.
    pub kind: String,
    pub config: Config,
    pub optimizer: Option<OptimizerMeta>,
    /// Model parameters followed by optimizer moments.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &Config, params: &ParamSet, opt: Option<&Adam>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if let Some(o) = opt {
            tensors.extend(o.m.iter().map(|(n, t)| (format!("{OPT_M}{n}"), t.clone())));
            tensors.extend(o.v.iter().map(|(n, t)| (format!("{OPT_V}{n}"), t.clone())));
        }
        Self {
            kind: kind.into(),
            config: config.clone(),
            optimizer: opt.map(|o| OptimizerMeta {
                lr: o.lr,
                weight_decay: o.weight_decay,
                step: o.step,
            }),
            tensors,
        }
    }

    pub fn coarse(config: &Config, model: &CoarseModel, opt: Option<&Adam>) -> Self {
        Self::new("coarse", config, &model.params, opt)
    }

    pub fn fine(config: &Config, model: &FineModel, opt: Option<&Adam>) -> Self {
        Self::new("fine", config, &model.params, opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let len = block_len(name, t);
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            optimizer: self.optimizer,
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header is plain data");
        let mut out = Vec::with_capacity(14 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &self.tensors {
            write_block(&mut out, name, t).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::Truncated {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(14)?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
        let start = 14usize
            .checked_add(hlen)
            .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
        need(start)?;
        let header: Header =
            serde_json::from_slice(&bytes[14..start]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[start..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            if e.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "{} starts at {} but the previous block ends at {expected_offset}",
                    e.name, e.offset
                )));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .ok_or_else(|| CheckpointError::Manifest(format!("{} length overflows", e.name)))?;
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    needed: start + end,
                    available: bytes.len(),
                });
            }
            let mut slice = &payload[e.offset..end];
            let (name, t) = read_block(&mut slice, e.len)
                .map_err(|err| CheckpointError::Manifest(format!("block {}: {err}", e.name)))?;
            if name != e.name || t.shape() != e.shape.as_slice() || !slice.is_empty() {
                return Err(CheckpointError::Manifest(format!(
                    "block at {} holds {name} {:?}, manifest says {} {:?} in {} bytes",
                    e.offset,
                    t.shape(),
                    e.name,
                    e.shape,
                    e.len
                )));
            }
            tensors.push((name, t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the last block",
                payload.len() - expected_offset
            )));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            optimizer: header.optimizer,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    fn expect_kind(&self, kind: &str) -> std::result::Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Header(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Overwrites every parameter of `params` from the checkpoint. Names must
    /// match one to one and shapes exactly.
    pub fn restore_into(&self, params: &mut ParamSet) -> std::result::Result<(), CheckpointError> {
        let stored: Vec<&(String, Tensor)> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(OPT_M) && !n.starts_with(OPT_V))
            .collect();
        for p in params.iter() {
            let Some((_, t)) = stored.iter().find(|(n, _)| *n == p.name) else {
                return Err(CheckpointError::Manifest(format!("missing parameter {}", p.name)));
            };
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Shape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some((n, _)) = stored.iter().find(|(n, _)| params.id_of(n).is_none()) {
            return Err(CheckpointError::Manifest(format!("unexpected parameter {n}")));
        }
        for p in params.iter_mut() {
            p.value = stored.iter().find(|(n, _)| *n == p.name).unwrap().1.clone();
        }
        Ok(())
    }

    /// Rebuilds the coarse model described by `config` and loads its weights.
    pub fn coarse_model(&self, config: &Config) -> Result<CoarseModel> {
        self.expect_kind("coarse")?;
        let mut model = CoarseModel::new(config.coarse.clone(), 0)?;
        self.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn fine_model(&self, config: &Config) -> Result<FineModel> {
        self.expect_kind("fine")?;
        let mut model = FineModel::new(config.fine.clone(), 0)?;
        self.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn optimizer_state(&self) -> Option<Adam> {
        let meta = self.optimizer?;
        let strip = |prefix: &str| {
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        Some(Adam {
            lr: meta.lr,
            weight_decay: meta.weight_decay,
            step: meta.step,
            m: strip(OPT_M),
            v: strip(OPT_V),
        })
    }
}
