//! Content hashes used for provenance tags in every artifact.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON serialization of `value`.
pub fn json_hash<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// First 16 hex digits, used where a short tag reads better.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}
