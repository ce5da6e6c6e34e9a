//! Binary checkpoint format.
//!
//! ```text
//! "BJLM" | u32 version | u64 meta_len | meta (JSON: config + vocabulary)
//! repeated per parameter, canonical order:
//!   u64 name_len | name | u32 rank | u64 extent * rank | f64 * numel
//! u32 CRC32 of every byte after the magic
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocabulary;
use crate::model::{Model, ModelConfig, ParamSet, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BJLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error("parameter records do not match the config: {0}")]
    Layout(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CheckpointError {
    /// Stable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadMagic => "E_MAGIC",
            Self::Version { .. } => "E_VERSION",
            Self::Truncated { .. } => "E_TRUNCATED",
            Self::Checksum { .. } => "E_CHECKSUM",
            Self::Metadata(_) => "E_METADATA",
            Self::Layout(_) => "E_LAYOUT",
            Self::Io { .. } => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: Vocabulary,
}

pub fn to_bytes(model: &Model, vocab: &Vocabulary) -> Vec<u8> {
    let meta = serde_json::to_vec(&Metadata {
        config: model.config.clone(),
        vocab: vocab.clone(),
    })
    .expect("metadata serializes");
    let mut out = Vec::with_capacity(16 + meta.len() + model.params.count() * 8 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    model.params.for_each(|name, t| {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    });
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated {
            have: self.buf.len(),
            need: self.pos.saturating_add(n),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn record_len(name: &str, shape: &[usize]) -> usize {
    8 + name.len() + 4 + 8 * shape.len() + 8 * shape.iter().product::<usize>()
}

/// Checks run in order: magic, version, metadata, total length, checksum,
/// then the records themselves.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Vocabulary)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Metadata("length overflows".into()))?;
    let meta: Metadata =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    meta.config.validate().map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    if meta.vocab.len() != meta.config.vocab_size {
        return Err(CheckpointError::Metadata(format!(
            "vocabulary has {} entries but the config expects {}",
            meta.vocab.len(),
            meta.config.vocab_size
        )));
    }

    let layout = ParamSet::layout(&meta.config);
    let mut expected = r.pos + 4;
    layout.for_each(|name, s| expected += record_len(name, &s.shape));
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            have: bytes.len(),
            need: expected,
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Layout(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    let body = &bytes[MAGIC.len()..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let params: Parameters = layout.try_map(&mut |name, spec| -> Result<Tensor> {
        let name_len = r.u64()? as usize;
        let found = r.take(name_len)?;
        if found != name.as_bytes() {
            return Err(CheckpointError::Layout(format!(
                "expected parameter {name}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != spec.shape {
            return Err(CheckpointError::Layout(format!(
                "{name}: shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        let raw = r.take(8 * shape.iter().product::<usize>())?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| CheckpointError::Layout(e.to_string()))
    })?;
    Ok((Model::from_parts(meta.config, params), meta.vocab))
}

pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, vocab)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
