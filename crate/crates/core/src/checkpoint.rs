//! AVTM model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "AVTM" version config_len config_text
//! { id_len id_bytes rank extent… f64_payload }…   until end of file
//! ```
//!
//! `config_text` is the `key=value` form of [`ModelConfig`].

use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{AvTransformer, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVTM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(config: &ModelConfig, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    let word = |out: &mut Vec<u8>, n: usize| out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config.to_kv_text();
    word(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    for p in params.iter() {
        word(&mut out, p.id.len());
        out.extend_from_slice(p.id.as_bytes());
        word(&mut out, p.value.rank());
        for e in p.value.shape() {
            word(&mut out, *e);
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn word(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Decodes a checkpoint and checks that its parameters fit the stored config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = cur.word("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(4, format!("unsupported AVTM version {version}")));
    }
    let len = cur.word("config length")?;
    let at = cur.pos as u64;
    let text = std::str::from_utf8(cur.take(len, "config")?)
        .map_err(|e| Error::format(at, format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_kv_text(text).map_err(|e| Error::format(at, format!("config: {e}")))?;
    let mut params = ParamSet::new();
    while cur.pos < bytes.len() {
        let start = cur.pos as u64;
        let id_len = cur.word("identifier length")?;
        let id = std::str::from_utf8(cur.take(id_len, "identifier")?)
            .map_err(|e| Error::format(start + 4, format!("identifier is not UTF-8: {e}")))?
            .to_owned();
        let rank_at = cur.pos as u64;
        let rank = cur.word("rank")?;
        if !(1..=3).contains(&rank) {
            return Err(Error::format(rank_at, format!("{id}: rank {rank} outside 1..=3")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.word("extent")?);
        }
        let n: usize = shape.iter().product();
        let payload_at = cur.pos as u64;
        let payload = cur.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(payload_at, format!("{id}: {e}")))?;
        params
            .insert(id, tensor)
            .map_err(|e| Error::format(start, e.to_string()))?;
    }
    AvTransformer::for_params(&config, &params)?;
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
