//! Small shared helpers: canonical JSON and byte hashing.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// JSON with keys sorted (serde_json's `Value` map is ordered), pretty
/// printed; byte-identical across runs for identical values.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// Little-endian bytes of an `f64` slice, for hashing and checkpoints.
pub fn f64_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct S {
            zebra: u32,
            alpha: u32,
        }
        let s = canonical_json(&S { zebra: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zebra").unwrap());
    }

    #[test]
    fn canonical_json_is_stable() {
        let mut m = BTreeMap::new();
        m.insert("b", 2.0_f64);
        m.insert("a", 0.1_f64);
        assert_eq!(canonical_json(&m).unwrap(), canonical_json(&m).unwrap());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
