//! Named, hash-based derivation of RNG seeds.

use sha2::{Digest, Sha256};

fn first_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Seed for a named pipeline stage, e.g. `derive_named(global, "split")`.
pub fn derive_named(base: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"named\0");
    h.update(base.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    first_u64(&h.finalize())
}

/// Seed for candidate `index` generated from the review `seed_id`.
pub fn derive_candidate(base: u64, seed_id: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"candidate\0");
    h.update(base.to_le_bytes());
    h.update((seed_id.len() as u64).to_le_bytes());
    h.update(seed_id.as_bytes());
    h.update((index as u64).to_le_bytes());
    first_u64(&h.finalize())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
