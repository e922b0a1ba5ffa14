//! Seeded random number generation.
//!
//! All randomness in the crate flows through ChaCha8, a counter-based stream
//! cipher generator whose output is identical on every platform. Independent
//! consumers (init, shuffling, dropout, corpus synthesis) draw from distinct
//! streams of the same seed so changing one never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the independent consumers of a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Synth = 4,
    Split = 5,
}

pub type Rng = ChaCha8Rng;

/// Generator for `seed` positioned on `stream`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator for `seed` on `stream`, advanced to a sub-sequence keyed by
/// `index` (e.g. the global step for dropout).
pub fn keyed(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = stream(seed, which);
    // 2^32 words per key leaves each key far more draws than a step uses.
    rng.set_word_pos((index as u128) << 32);
    rng
}
