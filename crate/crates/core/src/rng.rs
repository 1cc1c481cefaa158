//! Seeded random streams.
//!
//! Every random decision in the crate draws from ChaCha8 keyed by a 64-bit
//! seed (expanded with `SeedableRng::seed_from_u64`) and a 64-bit stream id.
//! ChaCha8 output is specified bit-for-bit, so plans and synthetic cohorts
//! reproduce across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
