//! Named random sub-streams derived from a single seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that,
//! for example, changing the batch order never perturbs parameter init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batching = 3,
    Gallery = 4,
    Split = 5,
    Validation = 6,
    Probe = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
