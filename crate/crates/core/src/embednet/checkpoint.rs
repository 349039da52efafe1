//! Versioned little-endian checkpoint layout:
//!
//! ```text
//! magic            8 bytes  "SEQENC\0\x01"
//! format version   u32
//! vocab_size, token_embed_dim, hidden_dim, output_dim, max_seq_len, seed   6 x u64
//! parameter count  u64
//! tensors          f64 x parameter count, in TENSOR_NAMES order
//! ```

use std::path::Path;

use super::{ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"SEQENC\0\x01";
const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 6 * 8 + 8;

pub fn encode_params(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    if !params.shape_matches(config) {
        return Err(Error::Checkpoint("parameter shapes do not match config".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.vocab_size as u64,
        config.token_embed_dim as u64,
        config.hidden_dim as u64,
        config.output_dim as u64,
        config.max_seq_len as u64,
        config.seed,
        params.len() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut cur = Cursor { bytes };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let config = ModelConfig {
        vocab_size: cur.u64()? as usize,
        token_embed_dim: cur.u64()? as usize,
        hidden_dim: cur.u64()? as usize,
        output_dim: cur.u64()? as usize,
        max_seq_len: cur.u64()? as usize,
        seed: cur.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config block: {e}")))?;
    let count = cur.u64()? as usize;
    let mut params = Weights::zeros(&config);
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match config ({})",
            params.len()
        )));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        }
    }
    if !cur.bytes.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            cur.bytes.len()
        )));
    }
    Ok((config, params))
}

pub fn save_params(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_params(params, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
