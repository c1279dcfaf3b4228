//! Named random sub-streams.
//!
//! Each consumer of randomness derives its own generator from the master seed,
//! a fixed label and an index, so adding a new consumer never shifts the
//! values another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const TOPOLOGY: &str = "topology";
pub const SCHEDULE: &str = "schedule";
pub const ADVERSARY: &str = "adversary";
pub const INIT: &str = "init";
pub const STRATEGY: &str = "strategy";
pub const DATA: &str = "data";

pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
