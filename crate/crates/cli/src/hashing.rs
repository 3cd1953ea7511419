//! Content hashing for stage caching and the run ledger. Config hashes
//! are SHA-256 over a canonical JSON serialization; input hashes are
//! SHA-256 over raw file bytes.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Hash of a value's JSON form. Struct fields serialize in declaration
/// order, so equal values always hash equally.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hash_bytes(&serde_json::to_vec(value)?))
}

/// Streaming SHA-256 of one file.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut f =
        File::open(path).with_context(|| format!("hashing input {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Hashes each file and labels it with its file name.
pub fn hash_files(paths: &[std::path::PathBuf]) -> Result<Vec<String>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok(format!("{name}:{}", hash_file(p)?))
        })
        .collect()
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn known_sha256_vector() {
        // SHA-256 of the empty string, a published constant.
        assert_eq!(
            hash_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_hash_matches_byte_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        let data: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
        File::create(&path).unwrap().write_all(&data).unwrap();
        assert_eq!(hash_file(&path).unwrap(), hash_bytes(&data));
    }

    #[test]
    fn json_hash_is_stable_and_value_sensitive() {
        #[derive(Serialize)]
        struct S {
            a: u32,
            b: Vec<f64>,
        }
        let h1 = hash_json(&S { a: 1, b: vec![0.5] }).unwrap();
        let h2 = hash_json(&S { a: 1, b: vec![0.5] }).unwrap();
        let h3 = hash_json(&S { a: 2, b: vec![0.5] }).unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
    }
}
