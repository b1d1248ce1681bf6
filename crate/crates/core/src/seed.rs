//! Keyed derivation of independent RNG substreams from one master seed.
//!
//! Every consumer of randomness asks for a stream by name (and optional
//! indices), so adding a new consumer never shifts the numbers another one
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derives a 256-bit seed for `label` and `path`.
    pub fn derive(&self, label: &str, path: &[u64]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        for p in path {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        seed
    }

    pub fn rng(&self, label: &str, path: &[u64]) -> SimRng {
        ChaCha8Rng::from_seed(self.derive(label, path))
    }
}
