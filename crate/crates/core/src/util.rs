//! Stable content hashing shared by record ids and seed streams.

use alloc::string::String;
use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts. The length prefixes keep adjacent
/// parts from running together, so `("ab", "c")` and `("a", "bc")` hash
/// differently.
pub(crate) fn sha_hex(parts: &[&[u8]]) -> String {
    hex::encode(digest(parts))
}

/// First eight bytes of the same digest, as a little-endian integer. Used to
/// derive deterministic RNG seeds from structured inputs.
pub(crate) fn sha_u64(parts: &[&[u8]]) -> u64 {
    let d = digest(parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}
