//! Seeded random streams. One root seed is split into independent ChaCha
//! streams per purpose, so drawing more numbers for one consumer never
//! shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Split,
    Init,
    WarmupShuffle,
    WarmupNoise,
    SearchShuffle,
    SearchNoise,
    FinetuneShuffle,
    FinetuneInit,
    BaselineShuffle,
    BaselineInit,
    Data,
    TestData,
}

impl Purpose {
    fn stream(self) -> u64 {
        match self {
            Purpose::Split => 1,
            Purpose::Init => 2,
            Purpose::WarmupShuffle => 3,
            Purpose::WarmupNoise => 4,
            Purpose::SearchShuffle => 5,
            Purpose::SearchNoise => 6,
            Purpose::FinetuneShuffle => 7,
            Purpose::FinetuneInit => 8,
            Purpose::BaselineShuffle => 9,
            Purpose::BaselineInit => 10,
            Purpose::Data => 11,
            Purpose::TestData => 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, purpose: Purpose) -> ChaCha8Rng {
        self.fork_indexed(purpose, 0)
    }

    /// Separate stream for repeated uses of one purpose (e.g. per trial).
    pub fn fork_indexed(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((purpose.stream() << 32) | index);
        rng
    }
}
