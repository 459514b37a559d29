//! Named random substreams derived from a single run seed.
//!
//! Each component draws from its own ChaCha stream so it can be reproduced in
//! isolation: changing how many numbers the KB trainer consumes never shifts
//! the episodes a meta-training run sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    KbInit,
    NegativeSampling,
    Episode,
    ModelInit,
    Synth,
}

impl Substream {
    fn id(self) -> u64 {
        match self {
            Substream::KbInit => 1,
            Substream::NegativeSampling => 2,
            Substream::Episode => 3,
            Substream::ModelInit => 4,
            Substream::Synth => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Substream::KbInit => "kb-init",
            Substream::NegativeSampling => "negative-sampling",
            Substream::Episode => "episode",
            Substream::ModelInit => "model-init",
            Substream::Synth => "synth",
        }
    }
}

pub fn substream(seed: u64, stream: Substream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Generator for the `index`-th episode of a run: `seed + index` on the
/// episode stream, so any episode can be regenerated without replaying the
/// ones before it.
pub fn episode_rng(seed: u64, index: usize) -> Rng {
    substream(seed.wrapping_add(index as u64), Substream::Episode)
}
