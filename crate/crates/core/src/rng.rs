//! Seeded random streams.
//!
//! Every stochastic operation draws from ChaCha8 seeded with the user seed and
//! a per-item stream number, so results do not depend on iteration or thread
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for item `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
