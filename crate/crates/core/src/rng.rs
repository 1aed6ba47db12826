//! Independent random streams, one per source of randomness.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Seeds for every random source in a training run. Keeping them separate
/// lets one source change (say, the kernel draws) without perturbing the
/// others (batch composition, initialization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedBundle {
    pub init: u64,
    pub shuffle: u64,
    pub mixup: u64,
    pub kernel: u64,
}

impl SeedBundle {
    /// Derives the four seeds from one master seed.
    pub fn from_master(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
            mixup: rng.next_u64(),
            kernel: rng.next_u64(),
        }
    }

    pub fn init_stream(&self) -> Stream {
        stream(self.init)
    }

    pub fn shuffle_stream(&self) -> Stream {
        stream(self.shuffle)
    }

    pub fn mixup_stream(&self) -> Stream {
        stream(self.mixup)
    }

    pub fn kernel_stream(&self) -> Stream {
        stream(self.kernel)
    }
}

impl Default for SeedBundle {
    fn default() -> Self {
        Self::from_master(0)
    }
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}
