//! Labeled, seeded random streams.
//!
//! Every randomized operation in the crate draws from a stream obtained here.
//! A stream is keyed by `(seed, label)`: the ChaCha20 key is the SHA-256 digest
//! of the little-endian seed followed by the UTF-8 label, so streams with
//! different labels are independent and a given pair always replays exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64, stream_label: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream_label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
