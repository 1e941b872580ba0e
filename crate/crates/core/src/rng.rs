//! Deterministic random streams.
//!
//! Every stochastic stage derives its generator from a `(seed, stream)` pair so
//! results do not depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream keyed by a string identifier (patient id) and a purpose tag.
pub fn keyed(seed: u64, tag: &str, id: &str) -> Rng {
    stream(seed, hash_str(&format!("{tag}\u{1f}{id}")))
}

pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}
