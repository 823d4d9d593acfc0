//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the run
//! seed, so enabling one mechanism (say, active-client sampling) never shifts
//! the batches another mechanism sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Partition,
    Validation,
    ActiveClients,
    Leakage,
    Synthetic,
    /// Per-client batch shuffling.
    Client(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Partition => 1,
            Stream::Validation => 2,
            Stream::ActiveClients => 3,
            Stream::Leakage => 4,
            Stream::Synthetic => 5,
            Stream::Client(i) => 1_000 + i as u64,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
