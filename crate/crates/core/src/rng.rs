//! Seeded random substreams.
//!
//! Every consumer of randomness derives its generator from a master seed, a
//! purpose tag and an index, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Trajectory = 1,
    Initialization = 2,
    Shuffle = 3,
    Divergence = 4,
    BehaviorPolicy = 5,
}

/// Generator for `(seed, purpose, index)`. Indices must stay below `2^56`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}
