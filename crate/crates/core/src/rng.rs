//! Per-item deterministic random streams.
//!
//! A stream is keyed by `(seed, id)`: the pair is hashed with SHA-256, the
//! first 8 bytes of the digest become the key of a ChaCha20 generator. Results
//! therefore depend only on the item identity, never on which worker handles
//! the item or in what order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Deterministic random stream for one item.
#[derive(Debug, Clone)]
pub struct RandomStream {
    key: u64,
    rng: ChaCha20Rng,
}

/// Hashes `(seed, id)` into a 64-bit stream key.
pub fn stream_key(seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((id.len() as u64).to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn derive_stream(seed: u64, id: &str) -> RandomStream {
    let key = stream_key(seed, id);
    RandomStream {
        key,
        rng: ChaCha20Rng::seed_from_u64(key),
    }
}

impl RandomStream {
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `[0, n)`. `n` must be positive.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index on an empty range");
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Access to the underlying generator, e.g. for slice shuffling.
    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}
