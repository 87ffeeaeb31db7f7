//! Seeded random substreams.
//!
//! Every run derives its randomness from one `u64` seed. Independent
//! consumers draw from distinct ChaCha stream ids, so adding draws in one
//! consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Mini-batch order.
    DataOrder = 2,
    /// Counterfactual metadata augmentation.
    Augmentation = 3,
    /// Synthetic class templates.
    SynthTemplates = 4,
    /// Synthetic examples.
    SynthSamples = 5,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
