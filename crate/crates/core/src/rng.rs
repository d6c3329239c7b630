//! Seeded random streams.
//!
//! Every consumer of randomness asks for a stream by label. The stream seed is a
//! mix of the run seed and a hash of the label, so adding a new consumer never
//! shifts the draws seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ label_hash(label))
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}
