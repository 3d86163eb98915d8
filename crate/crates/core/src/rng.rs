//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from the global seed plus a
//! domain tag and an index, so per-clip work can run in any order (or in
//! parallel) and still draw exactly the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, tag, index...)`.
pub fn stream(seed: u64, tag: &str, index: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ tag_hash(tag));
    for &i in index {
        h = splitmix64(h ^ i);
    }
    Rng::seed_from_u64(h)
}
