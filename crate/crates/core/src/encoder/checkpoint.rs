//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes  "KRSM"
//! version      u32      1
//! kind         u32      0 = mention/reference encoder pair, 1 = re-ranker
//! dim          u32
//! layers       u32
//! heads        u32
//! max_len      u32
//! vocab_size   u32
//! flags        u32      bit 0: reference texts include descriptions
//! seed         u64
//! tensors      f32 LE   kind 0: mention encoder blocks, then reference encoder blocks
//!                       kind 1: cross encoder blocks, then head weight [dim], head bias [1]
//! ```
//!
//! Encoder blocks are written in [`Encoder::blocks`] order: `tok_emb`,
//! `pos_emb`, then per layer `wq bq wk bk wv bv wo bo ln_g ln_b`.
//! All integers are little-endian. The vocabulary sits next to the
//! checkpoint as `<stem>.vocab.jsonl`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::model::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KRSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    BiEncoder = 0,
    Reranker = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: ModelKind,
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub flags: u32,
}

pub const FLAG_REFERENCE_DESCRIPTIONS: u32 = 1;

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.jsonl")
}

pub fn write(path: &Path, header: &Header, tensors: &[&[f64]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, header, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_to<W: Write>(w: &mut W, header: &Header, tensors: &[&[f64]]) -> std::io::Result<()> {
    let c = &header.config;
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        header.kind as u32,
        c.dim as u32,
        c.layers as u32,
        c.heads as u32,
        c.max_len as u32,
        header.vocab_size as u32,
        header.flags,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    for t in tensors {
        for &x in t.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the header and the remaining payload as `f64` values.
pub fn read(path: &Path) -> Result<(Header, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a KRSM checkpoint"));
    }
    let mut u32s = [0u32; 8];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *v = u32::from_le_bytes(b);
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let [version, kind, dim, layers, heads, max_len, vocab_size, flags] = u32s;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = match kind {
        0 => ModelKind::BiEncoder,
        1 => ModelKind::Reranker,
        _ => return Err(bad(&format!("unknown model kind {kind}"))),
    };
    let config = EncoderConfig {
        dim: dim as usize,
        layers: layers as usize,
        heads: heads as usize,
        max_len: max_len as usize,
        seed: u64::from_le_bytes(b8),
    };
    config.validate()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((
        Header {
            kind,
            config,
            vocab_size: vocab_size as usize,
            flags,
        },
        values,
    ))
}

/// Splits a payload into consecutive encoders of identical shape plus a tail.
pub fn split_encoders(
    header: &Header,
    mut values: Vec<f64>,
    count: usize,
    tail: usize,
    path: &Path,
) -> Result<(Vec<Encoder>, Vec<f64>)> {
    let per = Encoder::param_count(&header.config, header.vocab_size);
    if values.len() != per * count + tail {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "payload holds {} values, expected {}",
                values.len(),
                per * count + tail
            ),
        });
    }
    let tail_values = values.split_off(per * count);
    let encoders = values
        .chunks_exact(per)
        .map(|chunk| Encoder::from_params(header.config, header.vocab_size, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((encoders, tail_values))
}
