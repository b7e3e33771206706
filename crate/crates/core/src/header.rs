//! Shared container layout: 8-byte magic, little-endian `u32` header length,
//! a JSON header, then the binary payload.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::State(format!("cannot serialize header: {e}")))?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::State("header longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits `bytes` into its parsed header and the payload that follows.
pub(crate) fn decode<'a, H: DeserializeOwned>(
    kind: &'static str,
    magic: &[u8; 8],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::format(kind, "truncated before header length"));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            kind,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(kind, "header length exceeds file size"))?;
    let header = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| Error::format(kind, format!("header JSON: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let bytes = encode(b"TESTMAG1", &serde_json::json!({"a": 1}), &[1, 2, 3]).unwrap();
        let (h, payload): (serde_json::Value, _) = decode("test", b"TESTMAG1", &bytes).unwrap();
        assert_eq!(h["a"], 1);
        assert_eq!(payload, &[1, 2, 3]);
    }

    #[test]
    fn rejects_bad_frames() {
        let bytes = encode(b"TESTMAG1", &serde_json::json!({}), &[]).unwrap();
        assert!(decode::<serde_json::Value>("test", b"OTHERMAG", &bytes).is_err());
        assert!(decode::<serde_json::Value>("test", b"TESTMAG1", &bytes[..10]).is_err());
        let mut long = bytes.clone();
        long[8] = 200;
        assert!(decode::<serde_json::Value>("test", b"TESTMAG1", &long).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
