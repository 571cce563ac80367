//! Seeded random streams.
//!
//! One global seed fans out into independent named streams so that each
//! pipeline stage can be reproduced on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Relabel = 4,
    Mia = 5,
    RetrainInit = 6,
    Probe = 7,
}

/// Generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derives a plain `u64` sub-seed, used where a config carries a seed field.
pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

/// The `index`-th `u64` drawn from `stream`, for per-method sub-seeds.
pub fn indexed_seed(seed: u64, stream: Stream, index: usize) -> u64 {
    use rand::RngCore;
    let mut rng = stream_rng(seed, stream);
    (0..index).for_each(|_| {
        rng.next_u64();
    });
    rng.next_u64()
}

/// Generator seeded directly from a `u64` (stream 0).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
