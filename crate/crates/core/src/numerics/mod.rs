//! Dense tensors, layer primitives, reverse-mode gradients and Adam.

mod adam;
mod gradcheck;
mod graph;
mod param;
pub mod rng;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use param::{apply_stack, Activation, Linear, LinearVars, Mlp, ParamSet, Parameter};
pub use tensor::{matmul, Tensor};

pub(crate) use graph::{kl_term, mixture_row};
pub(crate) use param::{scoped, scoped_mut};

use crate::error::{Error, Result};

/// Mean and variance of a diagonal Gaussian, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianStats {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        mean.expect_same_shape(&var, "GaussianStats")?;
        let s = Self { mean, var };
        s.check_positive()?;
        Ok(s)
    }

    pub fn standard(rows: usize, cols: usize) -> Self {
        Self { mean: Tensor::zeros(&[rows, cols]), var: Tensor::full(&[rows, cols], 1.0) }
    }

    pub fn check_positive(&self) -> Result<()> {
        match self.var.data().iter().find(|v| !(**v > 0.0)) {
            Some(v) => Err(Error::Domain(format!("variance {v} is not positive"))),
            None => Ok(()),
        }
    }
}

/// `x W + b` on plain tensors.
pub fn affine(x: &Tensor, w: &Parameter, b: &Parameter) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.value.clone()), g.constant(b.value.clone()));
    let y = g.affine(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn leaky_rectify(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// `log(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(graph::softplus)
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// `mean + noise * sqrt(var)`.
pub fn reparam_sample(stats: &GaussianStats, noise: &Tensor) -> Result<Tensor> {
    stats.check_positive()?;
    stats.mean.expect_same_shape(noise, "reparam_sample noise")?;
    let data = stats
        .mean
        .data()
        .iter()
        .zip(stats.var.data())
        .zip(noise.data())
        .map(|((m, v), e)| m + e * v.sqrt())
        .collect();
    Tensor::new(stats.mean.shape().to_vec(), data)
}
