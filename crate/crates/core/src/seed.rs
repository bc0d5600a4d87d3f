//! Deterministic seed fan-out.
//!
//! A master seed is split into independent streams by hashing it together
//! with a path of tags (agent index, purpose, epoch, game ...). Every stream
//! is a function of the master seed and its path only, so workers can run in
//! any order and still reproduce the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream(mix(master))
    }

    /// Child stream for `tag`. Distinct tags give unrelated streams.
    pub fn child(self, tag: u64) -> Self {
        SeedStream(mix(self.0 ^ mix(tag.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

/// Well-known tags so call sites read as paths.
pub mod tag {
    pub const AGENT: u64 = 1;
    pub const TRAIN_GAME: u64 = 2;
    pub const TEST_GAME: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const CALIBRATION: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const NETWORK: u64 = 7;
    pub const REPLAY: u64 = 8;
}
