//! Binary checkpoint format.
//!
//! ```text
//! "TFCK"                      magic
//! u32                         version
//! u32, bytes                  run config text (UTF-8)
//! u32                         tensor count
//! per tensor:
//!   u32, bytes                name (UTF-8)
//!   u32                       rank
//!   u64 × rank                dims
//!   f64 × numel               values
//! [u8; 32]                    SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use numcore::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::harness::config::{RunConfig, Stage};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CheckpointError::Malformed("dimension overflows usize".into()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    /// Snapshot of a parameter store plus extra named tensors.
    pub fn from_store(config: &RunConfig, store: &ParamStore, extra: Vec<(String, Tensor)>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(extra);
        Checkpoint {
            config: config.to_text(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut buf, self.config.len());
        buf.extend_from_slice(self.config.as_bytes());
        put_u32(&mut buf, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.rank());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    fn parse_body(body: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes: body, at: 8 };
        let config = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.at != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Validates magic, version and checksum, then parses. A corrupted
    /// body whose structure runs out of bytes reports `Truncated`; any other
    /// digest failure reports `ChecksumMismatch`.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(truncation_or_checksum(body));
        }
        Self::parse_body(body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        bytes[bytes.len() - DIGEST_LEN..].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    /// Parses the config snapshot and checks it was written by `stage`.
    pub fn expect_stage(&self, stage: Stage) -> Result<RunConfig> {
        let cfg = self.run_config()?;
        if cfg.stage != stage {
            return Err(CheckpointError::StageMismatch {
                expected: stage.as_str().into(),
                found: cfg.stage.as_str().into(),
            }
            .into());
        }
        Ok(cfg)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names do not start with any of `skip` prefixes, as a
    /// parameter store.
    pub fn to_store(&self, skip: &[&str]) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if skip.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            store.insert(name.clone(), t.clone())?;
        }
        Ok(store)
    }
}

/// Decides between truncation and corruption for a body whose digest does
/// not match: a body that fails to parse because it ran out of bytes was
/// cut short.
fn truncation_or_checksum(body: &[u8]) -> CheckpointError {
    match Checkpoint::parse_body(body) {
        Err(CheckpointError::Truncated) => CheckpointError::Truncated,
        _ => CheckpointError::ChecksumMismatch,
    }
}
