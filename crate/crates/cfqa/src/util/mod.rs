//! Shared plumbing: seeded random streams, hashing, parallel iteration.

pub mod par;
pub mod rng;

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte string. Used for config hashes and the
/// vocabulary hash embedded in checkpoints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
