//! Deterministic per-task random streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Independent ChaCha stream for `(tag, parts…)`; the same inputs always give
/// the same stream regardless of thread scheduling.
pub fn derive_rng(tag: &str, parts: &[u64]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}
