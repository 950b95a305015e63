//! Little-endian checkpoint container.
//!
//! ```text
//! magic      8 bytes  "VFFNCKPT"
//! version    u32
//! length     u64      total file length, checksum included
//! digest     32 bytes SHA-256 of the model architecture
//! counters   u32 count, then (name, u64) pairs
//! rng states u32 count, then (name, 56-byte state) pairs
//! tensors    u32 count, then (name, dtype u8, rank u8, extents u64..., offset u64) entries
//! data       tensor payloads, little-endian, at their table offsets
//! checksum   32 bytes SHA-256 of everything before it
//! ```
//!
//! Names are a u32 byte length followed by UTF-8 bytes. Offsets are relative
//! to the start of the data section.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{RngState, RNG_STATE_BYTES};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"VFFNCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 32;
const CHECKSUM: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {found} of {expected} bytes")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint checksum mismatch (file corrupted)")]
    Checksum,
    #[error("checkpoint was written for a different model architecture")]
    ConfigMismatch,
    #[error("checkpoint stores {found:?} tensors, expected {expected:?}")]
    DType { found: DType, expected: DType },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything a checkpoint holds, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config_digest: [u8; 32],
    pub counters: Vec<(String, u64)>,
    pub rngs: Vec<(String, RngState)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn counter(&self, name: &str) -> Result<u64, CheckpointError> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn rng(&self, name: &str) -> Result<RngState, CheckpointError> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_u32(&mut body, self.counters.len() as u32);
        for (name, v) in &self.counters {
            put_name(&mut body, name);
            body.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut body, self.rngs.len() as u32);
        for (name, s) in &self.rngs {
            put_name(&mut body, name);
            body.extend_from_slice(&s.to_bytes());
        }
        put_u32(&mut body, self.tensors.len() as u32);
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            put_name(&mut body, name);
            body.push(T::DTYPE.tag());
            body.push(t.shape().len() as u8);
            for &e in t.shape() {
                body.extend_from_slice(&(e as u64).to_le_bytes());
            }
            body.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for &x in t.data() {
                x.write_le(&mut data);
            }
        }

        let total = HEADER + body.len() + data.len() + CHECKSUM;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&(total as u64).to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&body);
        out.extend_from_slice(&data);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(CheckpointError::Truncated {
                expected: HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let expected = r.u64()?;
        if (bytes.len() as u64) < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 != expected || expected < (HEADER + CHECKSUM) as u64 {
            return Err(CheckpointError::Malformed(format!(
                "length field {expected} does not match file size {}",
                bytes.len()
            )));
        }
        let end = bytes.len() - CHECKSUM;
        if Sha256::digest(&bytes[..end]).as_slice() != &bytes[end..] {
            return Err(CheckpointError::Checksum);
        }
        let r = &mut Reader {
            bytes: &bytes[..end],
            pos: r.pos,
        };
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);

        let mut counters = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            counters.push((name, r.u64()?));
        }
        let mut rngs = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let raw: &[u8; RNG_STATE_BYTES] = r.take(RNG_STATE_BYTES)?.try_into().expect("fixed length");
            rngs.push((name, RngState::from_bytes(raw)));
        }
        let n = r.u32()?;
        let mut table = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.name()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(CheckpointError::DType {
                    found: dtype,
                    expected: T::DTYPE,
                });
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let data = &r.bytes[r.pos..];
        let size = T::DTYPE.size_in_bytes();
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let span = offset
                .checked_add(numel * size)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` out of bounds")))?;
            let values = data[offset..span].chunks(size).map(T::read_le).collect();
            let t = Tensor::new(&shape, values).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config_digest,
            counters,
            rngs,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}
