//! Conditional generative modelling of ambiguous image-to-field tasks.
//!
//! Two ladder VAEs embed a conditioning field and a generated field into
//! low-dimensional codes; a mixture density network models the multimodal
//! relation between the two top codes; a locality-preserving embedding of
//! the conditioning inputs keeps their codes from collapsing. Sampling the
//! mixture and decoding yields diverse outputs for a single input.

mod binio;
pub mod baselines;
pub mod cdvae;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
mod fit;
pub mod ladder;
pub mod mdn;
pub mod numerics;
pub mod postprocess;

pub use cdvae::{CdvaeConfig, CdvaeParams, LossBreakdown, LossWeights, TrainSchedule};
pub use data::ScatteredDataset;
pub use error::{Error, Result};
pub use fit::{sampling_threads, FitConfig};
pub use ladder::{DvaeConfig, DvaeParams};
pub use mdn::{GmmParams, MdnConfig, MdnParams};
pub use numerics::{GaussianStats, Parameter, Tensor};
