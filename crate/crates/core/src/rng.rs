//! Seeded random streams.
//!
//! Every source of randomness draws from ChaCha8, a counter-based generator
//! whose output is identical on every platform. Each purpose gets its own
//! stream so that, for example, enabling quantization does not shift the
//! dropout masks drawn by the encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type NidRng = ChaCha8Rng;

/// Independent stream identifiers derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    NodeSplit = 1,
    EdgeSplit = 2,
    Init = 3,
    Dropout = 4,
    Codebook = 5,
    Mask = 6,
    Negatives = 7,
    Head = 8,
    Cluster = 9,
    Synth = 10,
    Reset = 11,
}

pub fn stream(seed: u64, stream: Stream) -> NidRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
