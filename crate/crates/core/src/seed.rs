//! Seed derivation. Every random stream in a run is seeded from the single
//! root seed as the first 8 bytes (little-endian) of
//! `SHA-256(root_le64 || label_utf8 || 0x00 || index_le64)`.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}
