//! Seeded random number streams.
//!
//! Every stochastic routine in the crate takes a `u64` seed and derives its
//! generator here, so a run is a pure function of its seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
///
/// Used wherever work is spread across threads: item `k` always sees the same
/// stream regardless of scheduling.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
