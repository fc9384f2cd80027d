//! Small shared helpers: content hashing for artifact identity.

use sha2::{Digest, Sha256};

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: impl AsRef<std::path::Path>) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Short git-style id: first 12 hex chars of the SHA-256.
pub fn short_id(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..12].to_string()
}
