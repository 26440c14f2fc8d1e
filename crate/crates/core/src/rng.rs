//! Seeded, stream-addressed random number generation.
//!
//! Every stochastic path in the crate draws from a ChaCha8 generator keyed by
//! an explicit `(seed, stream)` pair. There is no global RNG state; two call
//! sites never share a stream, so adding a consumer cannot perturb the draws
//! of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, one block per consumer.
pub mod streams {
    /// Base encoder initialization.
    pub const BASE_INIT: u64 = 0;
    /// Task data generation; add the task index.
    pub const TASK_DATA: u64 = 1_000;
    /// Fine-tuning head initialization; add the task index.
    pub const FINETUNE: u64 = 2_000;
    /// TAP sample selection; add the task index.
    pub const TAP_SAMPLES: u64 = 3_000;
    /// Alignment-loss mini-batch sampling; add the task index.
    pub const ADA_BATCH: u64 = 4_000;
}

/// A deterministic generator for the given seed and stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}

/// A seeded permutation of `0..n` (Fisher-Yates).
pub fn permutation(seed: u64, stream: u64, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream_rng(seed, stream);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
