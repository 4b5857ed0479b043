//! Single-file parameter archives.
//!
//! Layout: the magic string and a newline, a little-endian `u64` header
//! length, a JSON header (`meta` plus the tensor index), then every tensor's
//! values as little-endian `f64` in index order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsutil::atomic_write;
use crate::nn::NamedTensor;
use crate::{CoreSegError, Result};

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<NamedTensor>,
}

pub fn write_archive<M: Serialize>(
    path: &Path,
    magic: &str,
    meta: &M,
    tensors: &[NamedTensor],
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: tensors.to_vec(),
    })?;
    let payload: usize = tensors.iter().map(|t| t.data.len() * 8).sum();
    let mut buf = Vec::with_capacity(magic.len() + 9 + header.len() + payload);
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn read_archive<M: DeserializeOwned>(path: &Path, magic: &str) -> Result<(M, Vec<NamedTensor>)> {
    let bytes = std::fs::read(path)?;
    let bad = |detail: &str| CoreSegError::Archive {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let m = magic.len();
    if bytes.len() < m + 9 || &bytes[..m] != magic.as_bytes() || bytes[m] != b'\n' {
        return Err(bad(&format!("missing magic `{magic}`")));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[m + 1..m + 9]);
    let hlen = u64::from_le_bytes(len) as usize;
    let start = m + 9;
    let header_bytes = bytes
        .get(start..start + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {e}")))?;
    let mut offset = start + hlen;
    let mut tensors = header.tensors;
    for t in &mut tensors {
        let n: usize = t.shape.iter().product();
        let chunk = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        t.data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.meta, tensors))
}

/// SHA-256 over tensor names, shapes and exact value bits.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a NamedTensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0u8]);
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let tensors = vec![
            NamedTensor { name: "w".into(), shape: vec![2, 2], data: vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE] },
            NamedTensor { name: "b".into(), shape: vec![1], data: vec![0.125] },
        ];
        write_archive(&path, "CORESEG-CKPT-1", &serde_json::json!({"k": 3}), &tensors).unwrap();
        let (meta, back): (serde_json::Value, _) = read_archive(&path, "CORESEG-CKPT-1").unwrap();
        assert_eq!(meta["k"], 3);
        assert_eq!(back, tensors);
        assert_eq!(fingerprint(&back), fingerprint(&tensors));
        assert!(read_archive::<serde_json::Value>(&path, "CORESEG-CAE-1").is_err());
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let mut t = vec![NamedTensor { name: "w".into(), shape: vec![1], data: vec![1.0] }];
        let a = fingerprint(&t);
        t[0].data[0] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(a, fingerprint(&t));
    }
}
