//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `b"STTC"` | 4 bytes |
//! | version | u32 |
//! | geometry: stem kind (0 conv, 1 linear patch, 2 precomputed), patch, in_height, in_width, in_channels, stem channels, frames, dim, heads, blocks, mlp_hidden, classes, spatial, temporal | 14 x u32 |
//! | completed epochs | u32 |
//! | seed | u64 |
//! | config digest | 32 bytes |
//! | parameter count n | u64 |
//! | parameters | n x f32 |
//! | has velocity | u32 (0 or 1) |
//! | velocity | n x f32, if present |
//! | checksum: first 8 bytes of SHA-256 over everything above | u64 |
//!
//! Parameters are the tensors of [`ModelParams::named_tensors`] concatenated
//! in that order. Every random draw in training is a function of the seed and
//! the epoch, so those two fields are the whole RNG state.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{StemConfig, StemKind};
use crate::error::{Error, Result};
use crate::stt::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STTC";
pub const CHECKPOINT_VERSION: u32 = 1;

const GEOMETRY_WORDS: usize = 14;
/// Bytes before the parameter payload.
const HEADER_LEN: usize = 4 + 4 + 4 * GEOMETRY_WORDS + 4 + 8 + 32 + 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {found} bytes, expected {expected}")]
    Truncated { found: usize, expected: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint geometry {found} does not match expected {expected}")]
    GeometryMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything needed to resume training or evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub digest: [u8; 32],
    pub params: ModelParams<f32>,
    /// Momentum buffers, same layout as `params`.
    pub velocity: Option<ModelParams<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.params.param_count() + 12);
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for w in geometry_words(&self.config) {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.digest);
        buf.extend_from_slice(&(self.params.param_count() as u64).to_le_bytes());
        put_params(&mut buf, &self.params);
        buf.extend_from_slice(&u32::from(self.velocity.is_some()).to_le_bytes());
        if let Some(v) = &self.velocity {
            put_params(&mut buf, v);
        }
        let sum = checksum(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    /// Parse a checkpoint, checking its geometry against `expected` (when
    /// given) before anything else in the payload.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated {
                found: bytes.len(),
                expected: HEADER_LEN,
            });
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                found: bytes.len(),
                expected: HEADER_LEN,
            });
        }
        let mut geometry = [0u32; GEOMETRY_WORDS];
        for (i, g) in geometry.iter_mut().enumerate() {
            *g = word(8 + 4 * i);
        }
        if let Some(want) = expected {
            let want_words = geometry_words(want);
            if geometry != want_words {
                return Err(CheckpointError::GeometryMismatch {
                    found: format!("{geometry:?}"),
                    expected: format!("{want_words:?}"),
                });
            }
        }
        let config = config_from_words(&geometry)?;
        let mut at = 8 + 4 * GEOMETRY_WORDS;
        let epoch = word(at) as usize;
        at += 4;
        let seed = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        let digest: [u8; 32] = bytes[at..at + 32].try_into().unwrap();
        at += 32;
        let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        let template = ModelParams::<f32>::zeros(&config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let n = template.param_count();
        if count != n as u64 {
            return Err(CheckpointError::Corrupt(format!(
                "header declares {count} parameters, geometry implies {n}"
            )));
        }
        let with_velocity = HEADER_LEN + 8 * n + 12;
        let without = HEADER_LEN + 4 * n + 12;
        if bytes.len() < without {
            return Err(CheckpointError::Truncated {
                found: bytes.len(),
                expected: without,
            });
        }
        let flag = word(HEADER_LEN + 4 * n);
        let total = match flag {
            0 => without,
            1 => with_velocity,
            f => return Err(CheckpointError::Corrupt(format!("velocity flag {f}"))),
        };
        if bytes.len() < total {
            return Err(CheckpointError::Truncated {
                found: bytes.len(),
                expected: total,
            });
        }
        if bytes.len() > total {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - total)));
        }
        let stored = u64::from_le_bytes(bytes[total - 8..].try_into().unwrap());
        if stored != checksum(&bytes[..total - 8]) {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let params = take_params(&config, &bytes[at..at + 4 * n])?;
        let velocity = if flag == 1 {
            let start = HEADER_LEN + 4 * n + 4;
            Some(take_params(&config, &bytes[start..start + 4 * n])?)
        } else {
            None
        };
        Ok(Self {
            config,
            epoch,
            seed,
            digest,
            params,
            velocity,
        })
    }
}

/// Write atomically: the file at `path` is either the old one or the
/// complete new one.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes, None)?)
}

/// Load and reject any geometry other than `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes, Some(expected))?)
}

fn checksum(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

fn geometry_words(cfg: &ModelConfig) -> [u32; GEOMETRY_WORDS] {
    let (kind, patch) = match cfg.stem.kind {
        StemKind::ConvStem => (0, 0),
        StemKind::LinearPatch { patch } => (1, patch),
        StemKind::Precomputed => (2, 0),
    };
    [
        kind,
        patch,
        cfg.stem.in_height,
        cfg.stem.in_width,
        cfg.stem.in_channels,
        cfg.stem.channels,
        cfg.frames,
        cfg.dim,
        cfg.heads,
        cfg.blocks,
        cfg.mlp_hidden,
        cfg.classes,
        usize::from(cfg.spatial),
        usize::from(cfg.temporal),
    ]
    .map(|w| w as u32)
}

fn config_from_words(w: &[u32; GEOMETRY_WORDS]) -> Result<ModelConfig, CheckpointError> {
    let u = |i: usize| w[i] as usize;
    let kind = match w[0] {
        0 => StemKind::ConvStem,
        1 => StemKind::LinearPatch { patch: u(1) },
        2 => StemKind::Precomputed,
        k => return Err(CheckpointError::Corrupt(format!("unknown stem kind {k}"))),
    };
    let flag = |i: usize| match w[i] {
        0 => Ok(false),
        1 => Ok(true),
        f => Err(CheckpointError::Corrupt(format!("stage flag {f}"))),
    };
    let cfg = ModelConfig {
        stem: StemConfig {
            kind,
            in_height: u(2),
            in_width: u(3),
            in_channels: u(4),
            channels: u(5),
        },
        frames: u(6),
        dim: u(7),
        heads: u(8),
        blocks: u(9),
        mlp_hidden: u(10),
        classes: u(11),
        spatial: flag(12)?,
        temporal: flag(13)?,
    };
    cfg.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(cfg)
}

fn put_params(buf: &mut Vec<u8>, params: &ModelParams<f32>) {
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn take_params(cfg: &ModelConfig, bytes: &[u8]) -> Result<ModelParams<f32>, CheckpointError> {
    let mut params = ModelParams::<f32>::zeros(cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        let t: &mut Tensor<f32> = t;
        for v in t.data_mut() {
            *v = values.next().expect("payload sized from geometry");
        }
    }
    Ok(params)
}
