//! Binary weight container: magic, version, JSON header (config and group checksums), named
//! little-endian f32 blobs, and a trailing SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::HacConfig;
use crate::error::{NetError, Result};
use crate::params::{Group, ParamStore};

pub const MAGIC: &[u8; 4] = b"HACW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: HacConfig,
    pub groups: BTreeMap<Group, String>,
    /// Free-form provenance, e.g. the stage that wrote the file.
    #[serde(default)]
    pub note: String,
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

pub fn to_bytes(p: &ParamStore, note: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: p.config().clone(),
        groups: p.checksums()?.into_iter().collect(),
        note: note.to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let entries = p.entries()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Verify integrity and decode. `expected`, when given, must equal the stored config.
pub fn from_bytes(bytes: &[u8], expected: Option<&HacConfig>) -> Result<(ParamStore, CheckpointHeader)> {
    if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != MAGIC {
        return Err(bad("not a weight checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let jlen = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(jlen)?).map_err(|e| bad(e.to_string()))?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(bad("config mismatch with the checkpoint"));
        }
    }
    header.config.validate()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("parameter name"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    let want = crate::params::shapes(&header.config);
    if want.len() != entries.len() || want.iter().zip(&entries).any(|(a, b)| a.0 != b.0 || a.1 != b.1) {
        return Err(bad("parameter layout does not match the stored config"));
    }
    let store = ParamStore::from_parts(header.config.clone(), entries)?;
    for (g, sum) in store.checksums()? {
        if header.groups.get(&g) != Some(&sum) {
            return Err(bad(format!("group checksum mismatch for {g}")));
        }
    }
    Ok((store, header))
}

pub fn save(p: &ParamStore, path: impl AsRef<Path>, note: &str) -> Result<()> {
    std::fs::write(path, to_bytes(p, note)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, expected: Option<&HacConfig>) -> Result<(ParamStore, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ParamStore::init(&HacConfig::toy(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("w.hacw");
        save(&p, &f, "test").unwrap();
        let (q, h) = load(&f, Some(&HacConfig::toy())).unwrap();
        assert_eq!(h.note, "test");
        let (a, b) = (p.entries().unwrap(), q.entries().unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            let xb: Vec<u32> = x.2.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(to_bytes(&p, "test").unwrap(), to_bytes(&q, "test").unwrap());
    }

    #[test]
    fn corruption_and_config_mismatch() {
        let p = ParamStore::init(&HacConfig::toy(), 9).unwrap();
        let mut bytes = to_bytes(&p, "").unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes, None), Err(NetError::Checkpoint(m)) if m.contains("checksum")));
        let good = to_bytes(&p, "").unwrap();
        let mut other = HacConfig::toy();
        other.depth = 3;
        assert!(matches!(from_bytes(&good, Some(&other)), Err(NetError::Checkpoint(m)) if m.contains("config")));
        assert!(from_bytes(&good[..10], None).is_err());
        assert!(from_bytes(b"nope", None).is_err());
    }
}
