//! Keyed seed derivation. Every random stream in a run is derived from the
//! run's root seed plus a label and key, so results never depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Full 32-byte seed for a keyed stream.
pub fn stream_seed(root: u64, label: &str, key: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

pub fn derive_seed(root: u64, label: &str, key: &str, index: u64) -> u64 {
    let d = stream_seed(root, label, key, index);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn keyed_rng(root: u64, label: &str, key: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(root, label, key, index))
}
