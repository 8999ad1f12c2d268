//! Seed derivation. Every random stream in the crate is a ChaCha8 stream
//! keyed by a seed derived here, so results do not depend on thread
//! scheduling or platform RNG defaults.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Mixes a root seed with a list of labels into a new 64-bit seed.
pub fn derive_seed(root: u64, labels: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
