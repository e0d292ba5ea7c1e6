//! Seeded random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream derived from one
//! run seed, so stages can be re-run in isolation and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Simulation,
    Augmentation,
    Sampling,
    Prior,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Simulation => 1,
            Stream::Augmentation => 2,
            Stream::Sampling => 3,
            Stream::Prior => 4,
        }
    }
}

/// A generator for `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// A generator seeded directly, for operations that take a bare seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
