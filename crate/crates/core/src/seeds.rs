//! Stable seed derivation for independent random substreams.

use sha2::{Digest, Sha256};

/// First eight bytes (little endian) of SHA-256 over the parts, each
/// length-prefixed.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn seed_of(seed: u64, a: u64, b: u64) -> u64 {
    derive_seed(&[&seed.to_le_bytes(), &a.to_le_bytes(), &b.to_le_bytes()])
}
