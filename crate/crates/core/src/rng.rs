//! Deterministic RNG streams keyed by (seed, frame, purpose).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one purpose within one frame of one run.
pub fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ splitmix(stream)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

/// Hashes a label into a stream id.
pub fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub mod streams {
    pub const EDGE_NOISE: u64 = 1;
    pub const CLUTTER: u64 = 2;
    pub const OCCLUSION: u64 = 3;
    pub const CORRESPONDENCE: u64 = 4;
    pub const VO: u64 = 5;
    pub const TRACKER: u64 = 6;
    pub const RANSAC: u64 = 7;
    pub const VO_SCALE: u64 = 8;
    pub const INJECTION: u64 = 9;
}
