//! Seeded random streams.
//!
//! Every random draw in a run comes from one seed; components take
//! independent ChaCha streams of it so that changing, say, the sampler does not
//! perturb weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Sampler = 3,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
