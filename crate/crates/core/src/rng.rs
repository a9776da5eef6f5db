//! Named, non-overlapping random streams derived from one master seed.
//!
//! Every stochastic consumer (initialization, shuffling, masks, Bernoulli
//! realizations, corruption) draws from its own ChaCha stream. The key is
//! derived from the master seed; the 64-bit stream id packs the purpose tag
//! into the top 16 bits and the member index into the low 48 bits, so two
//! distinct `(purpose, index)` pairs can never share keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    Bernoulli = 4,
    Corrupt = 5,
    Data = 6,
    AnnealInit = 7,
}

const INDEX_BITS: u32 = 48;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    assert!(index < (1 << INDEX_BITS), "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}
