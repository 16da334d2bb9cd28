//! Content hashes used to tie artifacts together (grid, TPM, weights).

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// First 16 hex digits, for display.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}
