//! Fixtures shared by the kernel benchmarks.

use cdvae_core::ladder::{DvaeConfig, DvaeParams, LadderNoise};
use cdvae_core::numerics::{rng, Tensor};

/// A single-ladder setup at the default field size: inputs in [0, 1], fresh
/// parameters and noise for one batch.
pub fn ladder_fixture(batch: usize) -> (Tensor, DvaeParams, LadderNoise) {
    let cfg = DvaeConfig::default();
    let mut r = rng::stream(0, rng::streams::INIT);
    let x = rng::normal_tensor(&mut r, batch, cfg.input_dim).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let params = DvaeParams::init(&cfg, &mut r).expect("default config is valid");
    let noise = LadderNoise::sample(&cfg, batch, &mut r);
    (x, params, noise)
}

/// Two well-separated Gaussian clusters of `n` rows in `dim` dimensions.
pub fn clustered_features(n: usize, dim: usize) -> Tensor {
    let mut r = rng::stream(1, rng::streams::DATA);
    let mut f = rng::normal_tensor(&mut r, n, dim);
    for i in 0..n {
        let shift = if i % 2 == 0 { 5.0 } else { -5.0 };
        f.row_mut(i)[0] += shift;
    }
    f
}
