//! Deep VAE with ladder inference.
//!
//! Layers are indexed bottom (0) to top (`L - 1`). Inference runs a
//! deterministic upward pass producing "hat" statistics for every layer, then
//! a stochastic downward pass that, below the top, merges each hat with the
//! prior computed from the sample above by precision weighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    apply_stack, kl_term, rng, scoped, scoped_mut, Activation, GaussianStats, Graph, Linear, LinearVars, Mlp,
    ParamSet, Parameter, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvaeConfig {
    pub input_dim: usize,
    /// Latent widths, bottom to top.
    pub latent_dims: Vec<usize>,
    /// Encoder hidden widths for each latent layer; the decoder mirrors them.
    pub hidden: Vec<Vec<usize>>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Pin the reconstruction variance to 1, reducing the likelihood term to
    /// a scaled squared error.
    #[serde(default)]
    pub fixed_output_var: bool,
    /// Added to the reconstruction variance head.
    #[serde(default)]
    pub output_var_floor: f64,
}

fn default_slope() -> f64 {
    0.01
}

impl Default for DvaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            latent_dims: vec![64, 32],
            hidden: vec![vec![512, 512], vec![256, 256]],
            leaky_slope: default_slope(),
            fixed_output_var: false,
            output_var_floor: 0.0,
        }
    }
}

impl DvaeConfig {
    pub fn num_layers(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn top_dim(&self) -> usize {
        *self.latent_dims.last().expect("validated config has a latent layer")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1".into());
        }
        if self.latent_dims.is_empty() || self.latent_dims.contains(&0) {
            return bad(format!("latent_dims {:?} must be non-empty and positive", self.latent_dims));
        }
        if self.hidden.len() != self.latent_dims.len() {
            return bad(format!(
                "hidden has {} blocks for {} latent layers",
                self.hidden.len(),
                self.latent_dims.len()
            ));
        }
        if self.hidden.iter().flatten().any(|&h| h == 0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if !(self.output_var_floor >= 0.0) {
            return bad("output_var_floor must be non-negative".into());
        }
        Ok(())
    }

    fn act(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

/// Affine heads producing a mean (identity) and a variance (softplus).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Linear,
    pub var: Linear,
}

/// Hidden stack followed by a Gaussian head.
#[derive(Clone, Debug, PartialEq)]
pub struct LadderBlock {
    pub body: Mlp,
    pub head: GaussianHead,
}

impl LadderBlock {
    fn init(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        let body = Mlp::init(&dims, rng);
        let h = body.out_dim(in_dim);
        let head = GaussianHead { mean: Linear::init(h, out_dim, rng), var: Linear::init(h, out_dim, rng) };
        Self { body, head }
    }

    fn bind(&self, g: &mut Graph) -> BlockVars {
        BlockVars { body: self.body.bind(g), mean: self.head.mean.bind(g), var: self.head.var.bind(g) }
    }
}

impl ParamSet for LadderBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.body.visit(&mut scoped("body", f));
        self.head.mean.visit(&mut scoped("mean", f));
        self.head.var.visit(&mut scoped("var", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.body.visit_mut(&mut scoped_mut("body", f));
        self.head.mean.visit_mut(&mut scoped_mut("mean", f));
        self.head.var.visit_mut(&mut scoped_mut("var", f));
    }
}

/// Weights of one ladder VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct DvaeParams {
    pub config: DvaeConfig,
    /// `encoder[i]` maps `x` (i = 0) or the hat mean of layer `i - 1` to the
    /// hat statistics of layer `i`.
    pub encoder: Vec<LadderBlock>,
    /// `decoder[i]` maps `z_{i+1}` to the prior of layer `i`; `L - 1` blocks.
    pub decoder: Vec<LadderBlock>,
    /// Maps `z_0` to the reconstruction statistics.
    pub output: LadderBlock,
}

impl DvaeParams {
    pub fn init(config: &DvaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let l = config.num_layers();
        let mut encoder = Vec::with_capacity(l);
        let mut in_dim = config.input_dim;
        for i in 0..l {
            encoder.push(LadderBlock::init(in_dim, &config.hidden[i], config.latent_dims[i], rng));
            in_dim = config.latent_dims[i];
        }
        let mut decoder = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let hidden: Vec<usize> = config.hidden[i + 1].iter().rev().copied().collect();
            decoder.push(LadderBlock::init(config.latent_dims[i + 1], &hidden, config.latent_dims[i], rng));
        }
        let hidden: Vec<usize> = config.hidden[0].iter().rev().copied().collect();
        let output = LadderBlock::init(config.latent_dims[0], &hidden, config.input_dim, rng);
        Ok(Self { config: config.clone(), encoder, decoder, output })
    }

    pub fn bind(&self, g: &mut Graph) -> DvaeVars {
        DvaeVars {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(|b| b.bind(g)).collect(),
            decoder: self.decoder.iter().map(|b| b.bind(g)).collect(),
            output: self.output.bind(g),
        }
    }
}

impl ParamSet for DvaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.encoder.visit(&mut scoped("encoder", f));
        self.decoder.visit(&mut scoped("decoder", f));
        self.output.visit(&mut scoped("output", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.encoder.visit_mut(&mut scoped_mut("encoder", f));
        self.decoder.visit_mut(&mut scoped_mut("decoder", f));
        self.output.visit_mut(&mut scoped_mut("output", f));
    }
}

pub struct BlockVars {
    body: Vec<LinearVars>,
    mean: LinearVars,
    var: LinearVars,
}

/// Graph handles for a bound [`DvaeParams`].
pub struct DvaeVars {
    pub config: DvaeConfig,
    encoder: Vec<BlockVars>,
    decoder: Vec<BlockVars>,
    output: BlockVars,
}

#[derive(Clone, Copy, Debug)]
pub struct StatsVars {
    pub mean: Var,
    pub var: Var,
}

impl StatsVars {
    pub fn to_stats(self, g: &Graph) -> GaussianStats {
        GaussianStats { mean: g.value(self.mean).clone(), var: g.value(self.var).clone() }
    }
}

fn apply_block(g: &mut Graph, block: &BlockVars, act: Activation, x: Var) -> Result<StatsVars> {
    let h = apply_stack(g, &block.body, act, x)?;
    let mean = block.mean.apply(g, h)?;
    let pre = block.var.apply(g, h)?;
    let var = g.softplus(pre);
    Ok(StatsVars { mean, var })
}

/// Per-layer standard normal noise for the reparameterized samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LadderNoise {
    pub layers: Vec<Tensor>,
}

impl LadderNoise {
    pub fn sample(config: &DvaeConfig, batch: usize, rng: &mut impl Rng) -> Self {
        Self { layers: config.latent_dims.iter().map(|&d| rng::normal_tensor(rng, batch, d)).collect() }
    }

    pub fn zeros(config: &DvaeConfig, batch: usize) -> Self {
        Self { layers: config.latent_dims.iter().map(|&d| Tensor::zeros(&[batch, d])).collect() }
    }
}

/// Graph handles of a full ladder forward pass.
pub struct ForwardVars {
    pub hat: Vec<StatsVars>,
    pub prior: Vec<StatsVars>,
    pub post: Vec<StatsVars>,
    pub z: Vec<Var>,
    pub recon: StatsVars,
}

impl ForwardVars {
    pub fn top_post(&self) -> StatsVars {
        *self.post.last().expect("at least one layer")
    }

    pub fn top_z(&self) -> Var {
        *self.z.last().expect("at least one layer")
    }
}

impl DvaeVars {
    pub fn upward(&self, g: &mut Graph, x: Var) -> Result<Vec<StatsVars>> {
        g.value(x).expect_matrix(None, self.config.input_dim, "upward_pass input")?;
        let act = self.config.act();
        let mut hats = Vec::with_capacity(self.encoder.len());
        let mut input = x;
        for block in &self.encoder {
            let s = apply_block(g, block, act, input)?;
            input = s.mean;
            hats.push(s);
        }
        Ok(hats)
    }

    /// Prior of layer `i < L - 1` given the sample of layer `i + 1`.
    pub fn prior(&self, g: &mut Graph, z_above: Var, layer: usize) -> Result<StatsVars> {
        let block = self.decoder.get(layer).ok_or_else(|| {
            Error::Parameter(format!("no learned prior for layer {layer} of {}", self.config.num_layers()))
        })?;
        apply_block(g, block, self.config.act(), z_above)
    }

    pub fn reconstruct(&self, g: &mut Graph, z0: Var) -> Result<StatsVars> {
        let mut s = apply_block(g, &self.output, self.config.act(), z0)?;
        if self.config.fixed_output_var {
            let shape = g.value(s.mean).shape().to_vec();
            s.var = g.constant(Tensor::full(&shape, 1.0));
        } else if self.config.output_var_floor > 0.0 {
            s.var = g.add_const(s.var, self.config.output_var_floor);
        }
        Ok(s)
    }

    pub fn downward(&self, g: &mut Graph, hat: &[StatsVars], noise: &LadderNoise) -> Result<ForwardVars> {
        let l = self.config.num_layers();
        if hat.len() != l || noise.layers.len() != l {
            return Err(Error::Dimension(format!(
                "downward_pass: {} hat layers and {} noise layers for {l} latent layers",
                hat.len(),
                noise.layers.len()
            )));
        }
        let batch = g.value(hat[0].mean).rows();
        let top = l - 1;
        let mut prior = vec![None; l];
        let mut post = vec![None; l];
        let mut z = vec![None; l];

        let std = GaussianStats::standard(batch, self.config.latent_dims[top]);
        prior[top] = Some(StatsVars { mean: g.constant(std.mean), var: g.constant(std.var) });
        post[top] = Some(hat[top]);
        z[top] = Some(g.reparam(hat[top].mean, hat[top].var, noise.layers[top].clone())?);
        for i in (0..top).rev() {
            let p = self.prior(g, z[i + 1].expect("filled above"), i)?;
            let q = merge_vars(g, hat[i], p)?;
            z[i] = Some(g.reparam(q.mean, q.var, noise.layers[i].clone())?);
            prior[i] = Some(p);
            post[i] = Some(q);
        }
        let recon = self.reconstruct(g, z[0].expect("filled above"))?;
        Ok(ForwardVars {
            hat: hat.to_vec(),
            prior: prior.into_iter().map(Option::unwrap).collect(),
            post: post.into_iter().map(Option::unwrap).collect(),
            z: z.into_iter().map(Option::unwrap).collect(),
            recon,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, noise: &LadderNoise) -> Result<ForwardVars> {
        let hat = self.upward(g, x)?;
        self.downward(g, &hat, noise)
    }

    /// Generative path from a top sample: each lower layer takes its prior
    /// mean, or a prior sample when `noise` provides one. Returns the
    /// reconstruction statistics.
    pub fn decode_from_top(&self, g: &mut Graph, z_top: Var, noise: Option<&LadderNoise>) -> Result<StatsVars> {
        let top = self.config.num_layers() - 1;
        let mut z = z_top;
        for i in (0..top).rev() {
            let p = self.prior(g, z, i)?;
            z = match noise {
                Some(n) => g.reparam(p.mean, p.var, n.layers[i].clone())?,
                None => p.mean,
            };
        }
        self.reconstruct(g, z)
    }
}

/// Loss terms of one ladder VAE as graph scalars (batch means).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

pub fn loss_vars(g: &mut Graph, x: Var, fwd: &ForwardVars) -> Result<LossVars> {
    let nll = g.gaussian_nll(x, fwd.recon.mean, fwd.recon.var)?;
    let recon = g.mean(nll);
    let mut kl: Option<Var> = None;
    for (q, p) in fwd.post.iter().zip(&fwd.prior) {
        let rows = g.gaussian_kl(q.mean, q.var, p.mean, p.var)?;
        let layer = g.mean(rows);
        kl = Some(match kl {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    let kl = kl.expect("at least one layer");
    let total = g.add(recon, kl)?;
    Ok(LossVars { recon, kl, total })
}

fn merge_vars(g: &mut Graph, hat: StatsVars, prior: StatsVars) -> Result<StatsVars> {
    let ph = g.recip(hat.var);
    let pp = g.recip(prior.var);
    let prec = g.add(ph, pp)?;
    let var = g.recip(prec);
    let a = g.mul(hat.mean, ph)?;
    let b = g.mul(prior.mean, pp)?;
    let num = g.add(a, b)?;
    let mean = g.mul(num, var)?;
    Ok(StatsVars { mean, var })
}

/// Plain-value result of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DvaeForward {
    pub hat: Vec<GaussianStats>,
    pub prior: Vec<GaussianStats>,
    pub post: Vec<GaussianStats>,
    pub z: Vec<Tensor>,
    pub recon: GaussianStats,
}

impl DvaeForward {
    fn from_vars(g: &Graph, f: &ForwardVars) -> Self {
        let conv = |v: &[StatsVars]| v.iter().map(|s| s.to_stats(g)).collect();
        Self {
            hat: conv(&f.hat),
            prior: conv(&f.prior),
            post: conv(&f.post),
            z: f.z.iter().map(|&v| g.value(v).clone()).collect(),
            recon: f.recon.to_stats(g),
        }
    }
}

pub fn upward_pass(x: &Tensor, params: &DvaeParams) -> Result<Vec<GaussianStats>> {
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let xv = g.constant(x.clone());
    Ok(vars.upward(&mut g, xv)?.iter().map(|s| s.to_stats(&g)).collect())
}

/// Prior statistics of `layer` given the sample of the layer above; the top
/// layer's prior is the standard normal.
pub fn prior_stats(z_above: &Tensor, params: &DvaeParams, layer: usize) -> Result<GaussianStats> {
    let l = params.config.num_layers();
    if layer >= l {
        return Err(Error::Parameter(format!("layer {layer} out of range for {l} latent layers")));
    }
    if layer == l - 1 {
        return Ok(GaussianStats::standard(z_above.rows(), params.config.top_dim()));
    }
    z_above.expect_matrix(None, params.config.latent_dims[layer + 1], "prior_stats input")?;
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let z = g.constant(z_above.clone());
    Ok(vars.prior(&mut g, z, layer)?.to_stats(&g))
}

/// Precision-weighted combination of a bottom-up estimate and a top-down
/// prior: `var = 1 / (1/hat.var + 1/prior.var)`, `mean` the
/// precision-weighted average.
pub fn precision_merge(hat: &GaussianStats, prior: &GaussianStats) -> Result<GaussianStats> {
    hat.check_positive()?;
    prior.check_positive()?;
    hat.mean.expect_same_shape(&prior.mean, "precision_merge")?;
    hat.mean.expect_same_shape(&hat.var, "precision_merge hat")?;
    prior.mean.expect_same_shape(&prior.var, "precision_merge prior")?;
    let n = hat.mean.len();
    let (mut mean, mut var) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let ph = 1.0 / hat.var.data()[i];
        let pp = 1.0 / prior.var.data()[i];
        let v = 1.0 / (ph + pp);
        mean.push((hat.mean.data()[i] * ph + prior.mean.data()[i] * pp) * v);
        var.push(v);
    }
    let shape = hat.mean.shape().to_vec();
    Ok(GaussianStats { mean: Tensor::new(shape.clone(), mean)?, var: Tensor::new(shape, var)? })
}

pub fn downward_pass(hat: &[GaussianStats], params: &DvaeParams, noise: &LadderNoise) -> Result<DvaeForward> {
    for h in hat {
        h.check_positive()?;
    }
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let hv: Vec<StatsVars> = hat
        .iter()
        .map(|h| StatsVars { mean: g.constant(h.mean.clone()), var: g.constant(h.var.clone()) })
        .collect();
    let f = vars.downward(&mut g, &hv, noise)?;
    Ok(DvaeForward::from_vars(&g, &f))
}

pub fn forward(x: &Tensor, params: &DvaeParams, noise: &LadderNoise) -> Result<DvaeForward> {
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let f = vars.forward(&mut g, xv, noise)?;
    Ok(DvaeForward::from_vars(&g, &f))
}

/// Per-row `KL(q || p)` for diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianStats, p: &GaussianStats) -> Result<Vec<f64>> {
    q.check_positive()?;
    p.check_positive()?;
    q.mean.expect_same_shape(&p.mean, "gaussian_kl")?;
    q.mean.expect_same_shape(&q.var, "gaussian_kl q")?;
    p.mean.expect_same_shape(&p.var, "gaussian_kl p")?;
    Ok((0..q.mean.rows())
        .map(|i| {
            (0..q.mean.cols())
                .map(|j| kl_term(q.mean.get(i, j), q.var.get(i, j), p.mean.get(i, j), p.var.get(i, j)))
                .sum()
        })
        .collect())
}

/// Per-row negative log-density of `x` under the diagonal Gaussian `recon`.
pub fn gaussian_nll(x: &Tensor, recon: &GaussianStats) -> Result<Vec<f64>> {
    recon.check_positive()?;
    x.expect_same_shape(&recon.mean, "gaussian_nll")?;
    x.expect_same_shape(&recon.var, "gaussian_nll var")?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok((0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(recon.mean.row(i))
                .zip(recon.var.row(i))
                .map(|((x, m), v)| 0.5 * (ln2pi + v.ln() + (x - m) * (x - m) / v))
                .sum()
        })
        .collect())
}

/// Batch-mean loss terms of one ladder VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct DvaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Negative evidence lower bound, averaged over the batch.
pub fn dvae_loss(x: &Tensor, params: &DvaeParams, noise: &LadderNoise) -> Result<DvaeLoss> {
    let mut g = Graph::inference();
    eval_loss(&mut g, x, params, noise).map(|(l, _)| l)
}

/// Like [`dvae_loss`], also accumulating the gradient into `params`.
pub fn dvae_loss_grad(x: &Tensor, params: &mut DvaeParams, noise: &LadderNoise) -> Result<DvaeLoss> {
    let mut g = Graph::new();
    let (loss, total) = eval_loss(&mut g, x, params, noise)?;
    let grads = g.backward(total);
    g.write_param_grads(&grads, params);
    Ok(loss)
}

fn eval_loss(g: &mut Graph, x: &Tensor, params: &DvaeParams, noise: &LadderNoise) -> Result<(DvaeLoss, Var)> {
    let vars = params.bind(g);
    let xv = g.constant(x.clone());
    let f = vars.forward(g, xv, noise)?;
    let l = loss_vars(g, xv, &f)?;
    Ok((
        DvaeLoss { recon: g.value(l.recon).item(), kl: g.value(l.kl).item(), total: g.value(l.total).item() },
        l.total,
    ))
}
