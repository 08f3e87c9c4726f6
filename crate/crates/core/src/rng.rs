//! Named, counter-derived random streams.
//!
//! Every consumer of randomness in a run (pool initialisation, oracle draws,
//! member training, the random strategy, GP restarts, the quadratic
//! estimator) owns its own stream. A stream seed is a pure function of the
//! root seed, the stream name and a small tuple of counters, so adding a
//! consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    PoolInit,
    Oracle,
    Member,
    RandomStrategy,
    GpRestarts,
    Quadratic,
    Cheat,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::PoolInit => 0x706f_6f6c,
            Stream::Oracle => 0x6f72_6163,
            Stream::Member => 0x6d65_6d62,
            Stream::RandomStrategy => 0x7261_6e64,
            Stream::GpRestarts => 0x6770_7273,
            Stream::Quadratic => 0x7175_6164,
            Stream::Cheat => 0x6368_6561,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of `stream` at position `(a, b)` under `root`.
pub fn derive_seed(root: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(root);
    h = splitmix64(h ^ stream.tag());
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream(root: u64, stream: Stream, a: u64, b: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, stream, a, b))
}
