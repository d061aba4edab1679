//! Comparison methods: nearest-neighbour lookup, a conditional VAE with a
//! single Gaussian code, and a deterministic L2 regression.

mod cvae;
mod nn;
mod regression;

pub use cvae::{
    cvae_loss, cvae_loss_grad, cvae_sample, cvae_sample_pools, cvae_train, CvaeConfig, CvaeLoss, CvaeParams,
};
pub use nn::{gaussian_blur, nn_predict, NnIndex, DEFAULT_BLUR_SIGMA};
pub use regression::{
    regression_loss_grad, regression_pools, regression_predict, regression_train, RegressionConfig,
    RegressionParams,
};
