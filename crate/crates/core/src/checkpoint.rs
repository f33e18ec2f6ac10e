//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"MBCK"
//! u32    format version
//! u32    header length, then that many bytes of JSON header
//! u64    parameter count, then that many f64 values (tensor order of `DenoiserParams::tensors`)
//! [u8;32] SHA-256 of everything before it
//! ```
//!
//! Values are stored bit-exactly, so a save/load round trip reproduces the
//! network and every output computed from it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, DenoiserParams};
use crate::schedule::ScheduleConfig;

const MAGIC: &[u8; 4] = b"MBCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub schedule: ScheduleConfig,
    pub steps_trained: u64,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: String,
}

pub fn to_bytes(params: &DenoiserParams, schedule: &ScheduleConfig, config_hash: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        arch: params.arch().clone(),
        schedule: schedule.clone(),
        steps_trained: params.steps_trained,
        config_hash: config_hash.to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let values: usize = params.tensors().iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(4 + 4 + 4 + json.len() + 8 + 8 * values + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(values as u64).to_le_bytes());
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
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

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, DenoiserParams)> {
    if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = cur.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = DenoiserParams::zeros(header.arch.clone())?;
    let expected: usize = params.tensors().iter().map(|t| t.len()).sum();
    let count = cur.u64()? as usize;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} values stored, architecture needs {expected}"
        )));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    params.steps_trained = header.steps_trained;
    Ok((header, params))
}

pub fn save(path: &Path, params: &DenoiserParams, schedule: &ScheduleConfig, config_hash: &str) -> Result<()> {
    let bytes = to_bytes(params, schedule, config_hash)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, DenoiserParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn net() -> DenoiserParams {
        let arch = Architecture {
            data_dim: 3,
            n_conditions: 4,
            cond_dim: 5,
            time_dim: 6,
            hidden: vec![7, 8],
            timesteps: 100,
        };
        let mut p = DenoiserParams::init(arch, StreamKey::root(3)).unwrap();
        p.steps_trained = 42;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = net();
        let bytes = to_bytes(&p, &ScheduleConfig::default(), "abc").unwrap();
        let (h, q) = from_bytes(&bytes).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(h.steps_trained, 42);
        assert_eq!(p, q);
        assert_eq!(to_bytes(&q, &ScheduleConfig::default(), "abc").unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let p = net();
        let mut bytes = to_bytes(&p, &ScheduleConfig::default(), "").unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"nope, not a checkpoint at all......."), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = net();
        save(&path, &p, &ScheduleConfig::default(), "h").unwrap();
        assert_eq!(load(&path).unwrap().1, p);
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
