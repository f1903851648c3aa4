//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TLVCKPT\0"
//! version    u32
//! precision  u8       0 = f32 payload, 1 = f64 payload
//! meta_len   u32, then meta_len bytes of JSON metadata
//! count      u32 tensors, each:
//!   name_len u16, name bytes
//!   flags    u8       bit 0 trainable, bit 1 optimizer moment
//!   rows     u32, cols u32
//!   offset   u64      element offset into the payload
//! payload    values in table order
//! digest     32 bytes SHA-256 of everything before it
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m/{param}` and
//! `adam.v/{param}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Phase;
use crate::encoder::{ModelConfig, TlvModel};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::{ParamStore, Precision};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"TLVCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_TRAINABLE: u8 = 1;
const FLAG_MOMENT: u8 = 2;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint digest mismatch: file is corrupt")]
    Digest,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub lora_rank: Option<usize>,
    pub config_digest: String,
    pub trainable_ratio: f64,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model: TlvModel,
    pub optimizer: Option<AdamW>,
    pub config_digest: String,
}

/// First and second moment of one parameter, as read from the table.
type MomentPair = (Option<Array2<f64>>, Option<Array2<f64>>);

struct Tensor<'a> {
    name: String,
    flags: u8,
    value: &'a Array2<f64>,
}

impl Checkpoint {
    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            phase: self.phase,
            model: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            lora_rank: self.model.lora_rank,
            config_digest: self.config_digest.clone(),
            trainable_ratio: self.model.trainable_ratio(),
            optimizer: self.optimizer.as_ref().map(|o| o.config),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let precision = self.model.precision;
        let mut tensors: Vec<Tensor> = self
            .model
            .params
            .iter()
            .map(|p| Tensor {
                name: p.name.clone(),
                flags: if p.trainable { FLAG_TRAINABLE } else { 0 },
                value: &p.value,
            })
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, st) in &opt.state {
                tensors.push(Tensor {
                    name: format!("{M_PREFIX}{name}"),
                    flags: FLAG_MOMENT,
                    value: &st.m,
                });
                tensors.push(Tensor {
                    name: format!("{V_PREFIX}{name}"),
                    flags: FLAG_MOMENT,
                    value: &st.v,
                });
            }
        }
        let meta = serde_json::to_vec(&self.meta()).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match precision {
            Precision::Standard => 0,
            Precision::Verification => 1,
        });
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.flags);
            out.extend_from_slice(&(t.value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.value.ncols() as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.value.len() as u64;
        }
        for t in &tensors {
            for &v in t.value.iter() {
                match precision {
                    Precision::Standard => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::Verification => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 32 + r.pos {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Digest);
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let precision = match r.u8()? {
            0 => Precision::Standard,
            1 => Precision::Verification,
            p => return Err(CheckpointError::Malformed(format!("precision tag {p}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let flags = r.u8()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let offset = r.u64()? as usize;
            table.push((name, flags, rows, cols, offset));
        }
        let width = match precision {
            Precision::Standard => 4,
            Precision::Verification => 8,
        };
        let payload = &body[r.pos..];
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, MomentPair> = BTreeMap::new();
        let mut expected_offset = 0usize;
        for (name, flags, rows, cols, offset) in table {
            if offset != expected_offset {
                return Err(CheckpointError::Malformed(format!("tensor {name}: bad offset")));
            }
            let n = rows * cols;
            expected_offset += n;
            let start = offset * width;
            let raw = payload
                .get(start..start + n * width)
                .ok_or(CheckpointError::Truncated)?;
            let values: Vec<f64> = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    _ => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            let value = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if flags & FLAG_MOMENT != 0 {
                if let Some(p) = name.strip_prefix(M_PREFIX) {
                    moments.entry(p.to_string()).or_default().0 = Some(value);
                } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                    moments.entry(p.to_string()).or_default().1 = Some(value);
                } else {
                    return Err(CheckpointError::Malformed(format!("moment tensor {name}")));
                }
            } else {
                if params.index_of(&name).is_some() {
                    return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
                }
                params.insert(name, value, flags & FLAG_TRAINABLE != 0);
            }
        }
        if expected_offset * width != payload.len() {
            return Err(CheckpointError::Malformed("trailing payload bytes".into()));
        }
        let optimizer = match meta.optimizer {
            Some(config) => {
                let mut state = BTreeMap::new();
                for (name, pair) in moments {
                    match pair {
                        (Some(m), Some(v)) => {
                            state.insert(name, Moments { m, v });
                        }
                        _ => {
                            return Err(CheckpointError::Malformed(format!(
                                "incomplete moments for {name}"
                            )))
                        }
                    }
                }
                Some(AdamW {
                    config,
                    step: meta.optimizer_step,
                    state,
                })
            }
            None if moments.is_empty() => None,
            None => return Err(CheckpointError::Malformed("moments without optimizer".into())),
        };
        Ok(Checkpoint {
            phase: meta.phase,
            model: TlvModel {
                config: meta.model,
                vocab: meta.vocab,
                params,
                precision,
                lora_rank: meta.lora_rank,
            },
            optimizer,
            config_digest: meta.config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(CheckpointError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
