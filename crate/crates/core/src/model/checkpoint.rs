//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "FTLCKPT\0"
//! version          u32
//! config_len       u32      followed by that many UTF-8 bytes (JSON echo)
//! array_count      u32
//!   per array:     name_len u32, name bytes, rank u32, dims u64 * rank,
//!                  values f64 * prod(dims) (little-endian bits)
//! scalar_count     u32
//!   per scalar:    name_len u32, name bytes, value u64
//! checksum         32 bytes  SHA-256 over everything before it
//! ```
//!
//! Loading verifies the magic, the version, and the checksum before
//! parsing, so truncation and corruption are reported as distinct errors
//! rather than silently producing garbage parameters.

use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"FTLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (file corrupted)")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// In-memory checkpoint contents: an opaque config echo, named f64 arrays
/// (parameters, optimizer moments), and named u64 scalars (step counters,
/// RNG states) that must round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub arrays: Vec<(String, Matrix)>,
    pub scalars: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn scalar(&self, name: &str) -> Option<u64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_bytes(&mut buf, ckpt.config_json.as_bytes());
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, m) in &ckpt.arrays {
        write_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.scalars.len() as u32).to_le_bytes());
    for (name, v) in &ckpt.scalars {
        write_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    // Atomic write: temp file in the same directory, then rename.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    if &buf[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor {
        buf: body,
        pos: 8,
    };
    let version = cur.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_json = String::from_utf8(cur.read_bytes()?.to_vec())
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let array_count = cur.read_u32()? as usize;
    let mut arrays = Vec::with_capacity(array_count);
    for _ in 0..array_count {
        let name = String::from_utf8(cur.read_bytes()?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = cur.read_u32()?;
        if rank != 2 {
            return Err(CheckpointError::Malformed(format!(
                "array '{name}' has rank {rank}, expected 2"
            )));
        }
        let rows = cur.read_u64()? as usize;
        let cols = cur.read_u64()? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| {
            CheckpointError::Malformed(format!("array '{name}' dims overflow"))
        })?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cur.read_exact::<8>()?));
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Malformed(format!("array '{name}': {e}")))?;
        arrays.push((name, m));
    }

    let scalar_count = cur.read_u32()? as usize;
    let mut scalars = Vec::with_capacity(scalar_count);
    for _ in 0..scalar_count {
        let name = String::from_utf8(cur.read_bytes()?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let v = cur.read_u64()?;
        scalars.push((name, v));
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        config_json,
        arrays,
        scalars,
    })
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_exact<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        if self.pos + N > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.read_exact::<4>()?))
    }

    fn read_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.read_exact::<8>()?))
    }

    fn read_bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let len = self.read_u32()? as usize;
        if self.pos + len > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let slice = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }
}
