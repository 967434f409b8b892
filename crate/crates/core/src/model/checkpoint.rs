//! `UPWCKPT1` checkpoint container.
//!
//! ```text
//! magic            8 bytes  "UPWCKPT1"
//! config_len       u64
//! config           config_len bytes of `key = value` lines
//! param_count      u64
//! per parameter:
//!   name_len       u32
//!   name           name_len bytes, UTF-8
//!   ndim           u32
//!   dims           ndim x u64
//!   values         prod(dims) x f64, row-major
//! ```
//! All integers and floats are little-endian. No trailing bytes are allowed.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::kv::{KvError, KvMap};

use super::config::{ModelConfig, MODEL_KEYS};
use super::network::UnifiedModel;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UPWCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 at byte {offset}")]
    Utf8 { offset: usize },
    #[error("checkpoint config: {0}")]
    Config(#[from] KvError),
    #[error("checkpoint parameters: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let text = cfg.to_text();
    let mut out = Vec::with_capacity(64 + text.len() + params.element_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated { offset: at })
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Utf8 { offset: at })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 8 };
    let text_len = c.len()?;
    let kv = KvMap::parse(c.utf8(text_len)?)?;
    kv.check_keys(&MODEL_KEYS)?;
    for k in MODEL_KEYS {
        if !kv.contains(k) {
            return Err(KvError::Missing(k.to_string()).into());
        }
    }
    let cfg = ModelConfig::from_kv(&kv, ModelConfig::default())?;
    let count = c.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.utf8(name_len)?.to_string();
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::Truncated { offset: c.pos })?;
        let raw = c.take(
            n.checked_mul(8)
                .ok_or(CheckpointError::Truncated { offset: c.pos })?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok((cfg, params))
}

pub fn save_model(path: &Path, model: &UnifiedModel) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model.config(), model.params()))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<UnifiedModel, CheckpointError> {
    let (cfg, params) = decode_checkpoint(&fs::read(path)?)?;
    Ok(UnifiedModel::from_params(cfg, params)?)
}
