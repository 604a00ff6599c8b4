//! Seeded random-number streams.
//!
//! Every stochastic routine takes a `u64` seed and derives independent
//! sub-streams from it, so reruns with the same seed reproduce results exactly
//! and parallel workers never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fresh RNG for `seed`, stream 0.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

/// An RNG on an independent stream: same `seed`, different `stream` values
/// never overlap.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
