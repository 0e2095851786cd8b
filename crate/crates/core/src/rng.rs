//! Seedable counter-based random streams.
//!
//! Every stochastic operation takes an explicit generator. Streams are derived
//! from a run seed plus a stream identifier, so draws for one utterance or one
//! batch never depend on how many draws happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers, one per consumer.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SYNTH_MEANS: u64 = 5;
    pub const SYNTH_SAMPLES: u64 = 6;
}

/// Generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Mixes several indices into one stream identifier.
pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = a.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
