//! `KRSV` vector files.
//!
//! ```text
//! magic    4 bytes "KRSV"
//! version  u32     1
//! dim      u32
//! count    u64
//! rows     count * dim little-endian f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KRSV";
pub const VERSION: u32 = 1;

/// Writes `rows` (flat, row-major) as f32.
pub fn write(path: &Path, dim: usize, rows: &[f64]) -> Result<()> {
    assert!(dim > 0 && rows.len() % dim == 0);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, dim, rows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_to<W: Write>(w: &mut W, dim: usize, rows: &[f64]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&((rows.len() / dim) as u64).to_le_bytes())?;
    for &x in rows {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Returns `(dim, flat rows)`.
pub fn read(path: &Path) -> Result<(usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| bad("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic, not a KRSV vector file".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dim is zero".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() != count * dim * 4 {
        return Err(bad(format!(
            "expected {} rows of dim {dim}, found {} bytes",
            count,
            rest.len()
        )));
    }
    let rows = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dim, rows))
}
