//! Mixture density network over latent codes.
//!
//! Two tanh layers map a conditioning code to `(code_dim + 1) * K` outputs:
//! `K` component means followed by `K` mixture logits. Components share a
//! fixed isotropic standard deviation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mixture_row, scoped, scoped_mut, Activation, Graph, Linear, LinearVars, ParamSet, Parameter, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdnConfig {
    pub num_components: usize,
    pub code_dim: usize,
    /// Fixed component standard deviation.
    pub sigma: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self { num_components: 4, code_dim: 32, sigma: 0.1, activation: default_activation() }
    }
}

impl MdnConfig {
    pub fn output_width(&self) -> usize {
        (self.code_dim + 1) * self.num_components
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_components == 0 || self.code_dim == 0 {
            return Err(Error::Config("mdn needs at least one component and code_dim >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("mdn sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdnParams {
    pub config: MdnConfig,
    pub fc_a: Linear,
    pub fc_b: Linear,
}

impl MdnParams {
    pub fn init(config: &MdnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.output_width();
        Ok(Self { config: config.clone(), fc_a: Linear::init(config.code_dim, w, rng), fc_b: Linear::init(w, w, rng) })
    }

    pub fn bind(&self, g: &mut Graph) -> MdnVars {
        MdnVars { config: self.config.clone(), fc_a: self.fc_a.bind(g), fc_b: self.fc_b.bind(g) }
    }
}

impl ParamSet for MdnParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.fc_a.visit(&mut scoped("fc_a", f));
        self.fc_b.visit(&mut scoped("fc_b", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.fc_a.visit_mut(&mut scoped_mut("fc_a", f));
        self.fc_b.visit_mut(&mut scoped_mut("fc_b", f));
    }
}

pub struct MdnVars {
    config: MdnConfig,
    fc_a: LinearVars,
    fc_b: LinearVars,
}

/// Graph handles of a mixture: means `[batch, K * dim]`, logits `[batch, K]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub means: Var,
    pub logits: Var,
}

impl MdnVars {
    pub fn forward(&self, g: &mut Graph, z_c: Var) -> Result<MixtureVars> {
        g.value(z_c).expect_matrix(None, self.config.code_dim, "mdn input")?;
        let h = self.fc_a.apply(g, z_c)?;
        let h = self.config.activation.apply(g, h);
        let o = self.fc_b.apply(g, h)?;
        let o = self.config.activation.apply(g, o);
        let km = self.config.num_components * self.config.code_dim;
        let means = g.slice_cols(o, 0, km);
        let logits = g.slice_cols(o, km, self.config.output_width());
        Ok(MixtureVars { means, logits })
    }

    pub fn nll(&self, g: &mut Graph, z_g: Var, mix: MixtureVars) -> Result<Var> {
        g.mdn_nll(z_g, mix.means, mix.logits, self.config.sigma)
    }
}

/// A Gaussian mixture over one code: weights sum to one, means are `[K, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Tensor,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Tensor) -> Result<Self> {
        if means.rows() != weights.len() || means.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "{} weights for means of shape {:?}",
                weights.len(),
                means.shape()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights {weights:?} are not a distribution")));
        }
        Ok(Self { weights, means })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    fn from_outputs(means: &[f64], logits: &[f64], dim: usize) -> Self {
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - lmax).exp()).collect();
        let s: f64 = e.iter().sum();
        Self { weights: e.iter().map(|v| v / s).collect(), means: Tensor::matrix(logits.len(), dim, means.to_vec()) }
    }
}

/// Mixture parameters for every row of `z_c`.
pub fn mdn_forward(z_c: &Tensor, params: &MdnParams) -> Result<Vec<GmmParams>> {
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let z = g.constant(z_c.clone());
    let mix = vars.forward(&mut g, z)?;
    let (m, l) = (g.value(mix.means), g.value(mix.logits));
    Ok((0..z_c.rows()).map(|i| GmmParams::from_outputs(m.row(i), l.row(i), params.config.code_dim)).collect())
}

/// `-log sum_k pi_k N(z_g | mu_k, sigma^2 I)` per row, via log-sum-exp.
pub fn mdn_nll(z_g: &Tensor, gmm: &[GmmParams], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma {sigma} must be positive")));
    }
    if gmm.len() != z_g.rows() {
        return Err(Error::Dimension(format!("{} mixtures for {} codes", gmm.len(), z_g.rows())));
    }
    gmm.iter()
        .enumerate()
        .map(|(i, m)| {
            if m.dim() != z_g.cols() {
                return Err(Error::Dimension(format!("mixture dim {} vs code dim {}", m.dim(), z_g.cols())));
            }
            let log_w: Vec<f64> = m.weights.iter().map(|w| w.ln()).collect();
            Ok(mixture_row(z_g.row(i), m.means.data(), &log_w, sigma).nll)
        })
        .collect()
}

/// One draw: component by weight, then an isotropic Gaussian around its mean.
pub fn mdn_sample(gmm: &GmmParams, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = gmm.num_components() - 1;
    for (i, w) in gmm.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    gmm.means
        .row(k)
        .iter()
        .map(|m| {
            let e: f64 = StandardNormal.sample(rng);
            m + sigma * e
        })
        .collect()
}
