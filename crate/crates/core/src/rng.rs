//! Reproducible random streams.
//!
//! Every trajectory and every histogram draws from its own ChaCha8 stream:
//! the 64-bit seed keys the generator and the trial (or table) index selects
//! the stream. Results therefore do not depend on how work is split across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a histogram error signature, kept clear of trial ids.
pub fn signature_stream(signature: [u32; 3]) -> u64 {
    (1u64 << 63) | ((signature[0] as u64) << 40) | ((signature[1] as u64) << 20) | signature[2] as u64
}
