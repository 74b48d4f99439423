//! One master seed, split into independent streams per consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Partition,
    Init,
    LabeledOrder,
    UnlabeledOrder,
    CutMix,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Partition => 2,
            Stream::Init => 3,
            Stream::LabeledOrder => 4,
            Stream::UnlabeledOrder => 5,
            Stream::CutMix => 6,
        }
    }
}

/// A generator for `stream` under `seed`; distinct streams never overlap.
pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream.id());
    r
}

/// A generator for `stream` at a sub-position such as an epoch or iteration.
pub fn rng_at(seed: u64, stream: Stream, position: u64) -> ChaCha8Rng {
    let mut r = rng(seed, stream);
    r.set_word_pos(u128::from(position) << 20);
    r
}
