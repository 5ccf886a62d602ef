//! Deterministic RNG. All stochastic choices (init, shuffling) go through
//! ChaCha8 so a (seed, config) pair reproduces a run bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG algorithm name recorded in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8";

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a given purpose (epoch shuffles, per-layer init).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
