//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream id)`, so
//! adding draws in one place never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const GRAD_CHECK: u64 = 3;
    pub const SAMPLE: u64 = 4;
    /// Epoch `e` of training uses `TRAIN_BASE + e`.
    pub const TRAIN_BASE: u64 = 1 << 32;
    /// Test-time row `r` uses `SAMPLE_ROW_BASE + r`.
    pub const SAMPLE_ROW_BASE: u64 = 1 << 48;
}

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn normal_tensor(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}
