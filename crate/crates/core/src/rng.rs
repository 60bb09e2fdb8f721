//! Seeded random streams.
//!
//! Every simulation derives all of its randomness from one 64-bit seed. Each
//! consumer (workload generator, each request's commit oracle) gets its own
//! ChaCha stream so that adding or removing a request never perturbs the
//! draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream reserved for workload generation (arrivals and lengths).
pub const WORKLOAD_STREAM: u64 = 0;

/// Stream used for per-request commit decisions.
pub fn request_stream(request_id: u64) -> u64 {
    // Stream 0 belongs to the workload generator.
    request_id.wrapping_add(1)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
