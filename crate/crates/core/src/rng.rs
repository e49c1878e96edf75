//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream addressed by
//! `(seed, stream)`, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used to separate independent consumers of one run seed.
pub mod tag {
    pub const SYSTEM: u64 = 1;
    pub const INPUT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MIXTURE: u64 = 4;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for consumer `tag` of Monte Carlo run `run`.
pub fn run_stream(seed: u64, run: u64, tag: u64) -> ChaCha8Rng {
    stream(seed, (run << 8) | tag)
}
