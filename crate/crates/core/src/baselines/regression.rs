use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScatteredDataset;
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig};
use crate::numerics::{apply_stack, rng, scoped, scoped_mut, Activation, Graph, Linear, Mlp, ParamSet, Parameter, Tensor, Var};

/// Deterministic `x_c -> x_g` MLP fitted by mean squared error. Its sample
/// pools repeat one prediction, so its grid variance is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub cond_dim: usize,
    pub field_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![256]
}

fn default_slope() -> f64 {
    0.01
}

impl RegressionConfig {
    pub fn new(cond_dim: usize, field_dim: usize) -> Self {
        Self { cond_dim, field_dim, hidden: default_hidden(), leaky_slope: default_slope() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_dim == 0 || self.field_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("regression dimensions must be positive".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("regression leaky_slope must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionParams {
    pub config: RegressionConfig,
    pub body: Mlp,
    pub out: Linear,
}

impl RegressionParams {
    pub fn init(config: &RegressionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.cond_dim];
        dims.extend_from_slice(&config.hidden);
        let body = Mlp::init(&dims, rng);
        let out = Linear::init(*dims.last().expect("non-empty"), config.field_dim, rng);
        Ok(Self { config: config.clone(), body, out })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = self.body.bind(g);
        let h = apply_stack(g, &l, Activation::LeakyRelu(self.config.leaky_slope), x)?;
        self.out.bind(g).apply(g, h)
    }
}

impl ParamSet for RegressionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.body.visit(&mut scoped("body", f));
        self.out.visit(&mut scoped("out", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.body.visit_mut(&mut scoped_mut("body", f));
        self.out.visit_mut(&mut scoped_mut("out", f));
    }
}

/// Batch mean of `||f(x_c) - x_g||^2`, accumulating the gradient.
pub fn regression_loss_grad(x_c: &Tensor, x_g: &Tensor, params: &mut RegressionParams) -> Result<f64> {
    x_c.expect_matrix(None, params.config.cond_dim, "regression x_c")?;
    x_g.expect_matrix(Some(x_c.rows()), params.config.field_dim, "regression x_g")?;
    let mut g = Graph::new();
    let xc = g.constant(x_c.clone());
    let xg = g.constant(x_g.clone());
    let out = params.forward(&mut g, xc)?;
    let d = g.sq_dist(out, xg)?;
    let loss = g.mean(d);
    let grads = g.backward(loss);
    g.write_param_grads(&grads, params);
    Ok(g.value(loss).item())
}

pub fn regression_train(
    dataset: &ScatteredDataset,
    config: &RegressionConfig,
    fit_cfg: &FitConfig,
) -> Result<(RegressionParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut params = RegressionParams::init(config, &mut rng::stream(fit_cfg.seed, rng::streams::INIT))?;
    let history = fit(&mut params, dataset.len(), fit_cfg, |p, idx, _| {
        regression_loss_grad(&dataset.x_c.select_rows(idx), &dataset.x_g.select_rows(idx), p)
    })?;
    Ok((params, history))
}

/// Predictions for each row of `x_c`, clamped to [0, 1].
pub fn regression_predict(x_c: &Tensor, params: &RegressionParams) -> Result<Tensor> {
    if !params.all_finite() {
        return Err(Error::Domain("model parameters contain non-finite values".into()));
    }
    x_c.expect_matrix(None, params.config.cond_dim, "regression x_c")?;
    let mut g = Graph::inference();
    let x = g.constant(x_c.clone());
    let out = params.forward(&mut g, x)?;
    Ok(g.value(out).map(|v| v.clamp(0.0, 1.0)))
}

/// `n` copies of the prediction per row of `x_c`.
pub fn regression_pools(params: &RegressionParams, x_c: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let pred = regression_predict(x_c, params)?;
    Ok((0..x_c.rows())
        .map(|r| Tensor::matrix(n, pred.cols(), (0..n).flat_map(|_| pred.row(r).iter().copied()).collect()))
        .collect())
}
