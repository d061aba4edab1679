//! The joint conditional model: a ladder VAE over conditioning fields, one
//! over generated fields, and a mixture density network from the
//! conditional top code to the generative top code.

mod sample;
mod train;

pub use sample::{cond_reconstruction, conditional_sample, encode_code, sample_pools, CodeSide};
pub use train::{
    history_to_tensor, prepare_targets, tensor_to_history, train, EpochRecord, Phase, TrainData, TrainSchedule,
    Trainer, HISTORY_COLUMNS,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::embed_loss_var;
use crate::error::{Error, Result};
use crate::ladder::{loss_vars, DvaeConfig, DvaeParams, DvaeVars, LadderNoise};
use crate::mdn::{MdnConfig, MdnParams, MdnVars};
use crate::numerics::{scoped, scoped_mut, Graph, ParamSet, Parameter, Tensor, Var};

/// How intermediate latents are chosen when decoding from a top code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePath {
    /// Sample each lower layer from its prior.
    #[default]
    Sampled,
    /// Take each prior mean.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdvaeConfig {
    pub cond: DvaeConfig,
    pub gen: DvaeConfig,
    pub mdn: MdnConfig,
    /// Block the mixture term's gradient into the conditional encoder.
    #[serde(default)]
    pub stop_grad_cond: bool,
    /// Conditional latent layers tied to an embedding; defaults to the top.
    #[serde(default)]
    pub guided_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub decode_path: DecodePath,
}

impl Default for CdvaeConfig {
    fn default() -> Self {
        Self {
            cond: DvaeConfig::default(),
            gen: DvaeConfig::default(),
            mdn: MdnConfig::default(),
            stop_grad_cond: false,
            guided_layers: None,
            decode_path: DecodePath::Sampled,
        }
    }
}

impl CdvaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.cond.validate()?;
        self.gen.validate()?;
        self.mdn.validate()?;
        let (c, g, m) = (self.cond.top_dim(), self.gen.top_dim(), self.mdn.code_dim);
        if c != m || g != m {
            return Err(Error::Config(format!("top code dims cond {c} / gen {g} must equal mdn code_dim {m}")));
        }
        let layers = self.guided_layers();
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.cond.num_layers()) {
            return Err(Error::Config(format!("guided layer {bad} out of {} latent layers", self.cond.num_layers())));
        }
        let mut sorted = layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layers.len() {
            return Err(Error::Config("guided_layers has duplicates".into()));
        }
        Ok(())
    }

    pub fn guided_layers(&self) -> Vec<usize> {
        self.guided_layers.clone().unwrap_or_else(|| vec![self.cond.num_layers() - 1])
    }
}

/// Non-negative multipliers of the four loss groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub mdn: f64,
    pub embed: f64,
}

impl LossWeights {
    /// High reconstruction and guidance, low mixture weight.
    pub const INITIAL: Self = Self { recon: 1.0, kl: 1.0, mdn: 0.1, embed: 10.0 };
    pub const FINAL: Self = Self { recon: 1.0, kl: 1.0, mdn: 1.0, embed: 0.5 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("recon", self.recon), ("kl", self.kl), ("mdn", self.mdn), ("embed", self.embed)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn lerp(&self, to: &Self, t: f64) -> Self {
        let f = |a: f64, b: f64| a + (b - a) * t;
        Self { recon: f(self.recon, to.recon), kl: f(self.kl, to.kl), mdn: f(self.mdn, to.mdn), embed: f(self.embed, to.embed) }
    }
}

/// Batch-mean loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_c: f64,
    pub kl_c: f64,
    pub recon_g: f64,
    pub kl_g: f64,
    pub mdn: f64,
    pub embed: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.recon * (self.recon_c + self.recon_g) + w.kl * (self.kl_c + self.kl_g) + w.mdn * self.mdn + w.embed * self.embed
    }

    /// The first non-finite component, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon_c", self.recon_c),
            ("kl_c", self.kl_c),
            ("recon_g", self.recon_g),
            ("kl_g", self.kl_g),
            ("mdn", self.mdn),
            ("embed", self.embed),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    fn scaled_add(&mut self, other: &Self, s: f64) {
        self.recon_c += s * other.recon_c;
        self.kl_c += s * other.kl_c;
        self.recon_g += s * other.recon_g;
        self.kl_g += s * other.kl_g;
        self.mdn += s * other.mdn;
        self.embed += s * other.embed;
        self.total += s * other.total;
    }

    fn zero() -> Self {
        Self { recon_c: 0.0, kl_c: 0.0, recon_g: 0.0, kl_g: 0.0, mdn: 0.0, embed: 0.0, total: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdvaeParams {
    pub config: CdvaeConfig,
    pub cond: DvaeParams,
    pub gen: DvaeParams,
    pub mdn: MdnParams,
}

impl CdvaeParams {
    pub fn init(config: &CdvaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cond = DvaeParams::init(&config.cond, rng)?;
        let gen = DvaeParams::init(&config.gen, rng)?;
        let mdn = MdnParams::init(&config.mdn, rng)?;
        Ok(Self { config: config.clone(), cond, gen, mdn })
    }

    pub fn bind(&self, g: &mut Graph) -> CdvaeVars {
        CdvaeVars { cond: self.cond.bind(g), gen: self.gen.bind(g), mdn: self.mdn.bind(g) }
    }
}

impl ParamSet for CdvaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.cond.visit(&mut scoped("cond", f));
        self.gen.visit(&mut scoped("gen", f));
        self.mdn.visit(&mut scoped("mdn", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.cond.visit_mut(&mut scoped_mut("cond", f));
        self.gen.visit_mut(&mut scoped_mut("gen", f));
        self.mdn.visit_mut(&mut scoped_mut("mdn", f));
    }
}

pub struct CdvaeVars {
    pub cond: DvaeVars,
    pub gen: DvaeVars,
    pub mdn: MdnVars,
}

/// Reparameterization noise for both ladders.
#[derive(Clone, Debug, PartialEq)]
pub struct CdvaeNoise {
    pub cond: LadderNoise,
    pub gen: LadderNoise,
}

impl CdvaeNoise {
    pub fn sample(config: &CdvaeConfig, batch: usize, rng: &mut impl Rng) -> Self {
        let cond = LadderNoise::sample(&config.cond, batch, rng);
        let gen = LadderNoise::sample(&config.gen, batch, rng);
        Self { cond, gen }
    }

    pub fn zeros(config: &CdvaeConfig, batch: usize) -> Self {
        Self { cond: LadderNoise::zeros(&config.cond, batch), gen: LadderNoise::zeros(&config.gen, batch) }
    }
}

/// Builds the joint objective. Terms whose weight is zero are evaluated on
/// detached inputs so they report a value but pass no gradient.
fn build_loss(
    g: &mut Graph,
    vars: &CdvaeVars,
    config: &CdvaeConfig,
    x_c: &Tensor,
    x_g: &Tensor,
    targets: &[Tensor],
    w: &LossWeights,
    noise: &CdvaeNoise,
) -> Result<(LossBreakdown, Var)> {
    w.validate()?;
    let layers = config.guided_layers();
    if targets.len() != layers.len() {
        return Err(Error::Dimension(format!("{} embedding targets for {} guided layers", targets.len(), layers.len())));
    }
    if x_c.rows() != x_g.rows() {
        return Err(Error::Dimension(format!("batch sizes differ: x_c {} vs x_g {}", x_c.rows(), x_g.rows())));
    }
    let xc = g.constant(x_c.clone());
    let fc = vars.cond.forward(g, xc, &noise.cond)?;
    let lc = loss_vars(g, xc, &fc)?;
    let xg = g.constant(x_g.clone());
    let fg = vars.gen.forward(g, xg, &noise.gen)?;
    let lg = loss_vars(g, xg, &fg)?;

    let (mut zc, mut zg) = (fc.top_z(), fg.top_z());
    if w.mdn == 0.0 || config.stop_grad_cond {
        zc = g.detach(zc);
    }
    if w.mdn == 0.0 {
        zg = g.detach(zg);
    }
    let mix = vars.mdn.forward(g, zc)?;
    let mdn_rows = vars.mdn.nll(g, zg, mix)?;
    let mdn = g.mean(mdn_rows);

    let mut embed: Option<Var> = None;
    for (&layer, p) in layers.iter().zip(targets) {
        let mut m = fc.post[layer].mean;
        let dim = g.value(m).cols();
        if p.cols() > dim || p.rows() != x_c.rows() {
            return Err(Error::Dimension(format!(
                "embedding target {:?} for latent layer {layer} of width {dim}",
                p.shape()
            )));
        }
        if p.cols() < dim {
            m = g.slice_cols(m, 0, p.cols());
        }
        if w.embed == 0.0 {
            m = g.detach(m);
        }
        let term = embed_loss_var(g, m, p)?;
        embed = Some(match embed {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let embed = match embed {
        Some(e) => e,
        None => g.constant(Tensor::scalar(0.0)),
    };

    let rec = g.add(lc.recon, lg.recon)?;
    let rec = g.scale(rec, w.recon);
    let kl = g.add(lc.kl, lg.kl)?;
    let kl = g.scale(kl, w.kl);
    let md = g.scale(mdn, w.mdn);
    let em = g.scale(embed, w.embed);
    let t = g.add(rec, kl)?;
    let t = g.add(t, md)?;
    let total = g.add(t, em)?;

    let v = |g: &Graph, x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        recon_c: v(g, lc.recon),
        kl_c: v(g, lc.kl),
        recon_g: v(g, lg.recon),
        kl_g: v(g, lg.kl),
        mdn: v(g, mdn),
        embed: v(g, embed),
        total: v(g, total),
    };
    Ok((breakdown, total))
}

/// Joint objective on one batch. `targets` holds one embedding matrix per
/// guided layer, rows aligned with `x_c`.
pub fn total_loss(
    x_c: &Tensor,
    x_g: &Tensor,
    targets: &[Tensor],
    params: &CdvaeParams,
    weights: &LossWeights,
    noise: &CdvaeNoise,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    build_loss(&mut g, &vars, &params.config, x_c, x_g, targets, weights, noise).map(|r| r.0)
}

/// Like [`total_loss`], also accumulating gradients into `params`.
pub fn total_loss_grad(
    x_c: &Tensor,
    x_g: &Tensor,
    targets: &[Tensor],
    params: &mut CdvaeParams,
    weights: &LossWeights,
    noise: &CdvaeNoise,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let (b, total) = build_loss(&mut g, &vars, &params.config, x_c, x_g, targets, weights, noise)?;
    let grads = g.backward(total);
    g.write_param_grads(&grads, params);
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::{dvae_loss, dvae_loss_grad};
    use crate::mdn::{mdn_forward, mdn_nll};
    use crate::numerics::{grad_check, rng, Activation, GradCheckConfig};

    pub(crate) fn toy_config() -> CdvaeConfig {
        let d = |i| DvaeConfig {
            input_dim: i,
            latent_dims: vec![4, 3],
            hidden: vec![vec![6], vec![5]],
            leaky_slope: 0.01,
            fixed_output_var: false,
            output_var_floor: 0.0,
        };
        CdvaeConfig {
            cond: d(5),
            gen: d(6),
            mdn: MdnConfig { num_components: 2, code_dim: 3, sigma: 0.5, activation: Activation::Tanh },
            stop_grad_cond: false,
            guided_layers: None,
            decode_path: DecodePath::Sampled,
        }
    }

    fn batch(seed: u64) -> (Tensor, Tensor, Vec<Tensor>, CdvaeNoise, CdvaeParams) {
        let cfg = toy_config();
        let mut r = rng::stream(seed, 0);
        let params = CdvaeParams::init(&cfg, &mut r).unwrap();
        let xc = rng::normal_tensor(&mut r, 3, 5).map(|v| 0.5 + 0.2 * v);
        let xg = rng::normal_tensor(&mut r, 3, 6).map(|v| 0.5 + 0.2 * v);
        let p = rng::normal_tensor(&mut r, 3, 2);
        let noise = CdvaeNoise::sample(&cfg, 3, &mut r);
        (xc, xg, vec![p], noise, params)
    }

    #[test]
    fn zero_coupling_splits_into_two_dvaes() {
        let (xc, xg, p, noise, params) = batch(1);
        let w = LossWeights { recon: 1.0, kl: 1.0, mdn: 0.0, embed: 0.0 };
        let b = total_loss(&xc, &xg, &p, &params, &w, &noise).unwrap();
        let c = dvae_loss(&xc, &params.cond, &noise.cond).unwrap();
        let gl = dvae_loss(&xg, &params.gen, &noise.gen).unwrap();
        assert_eq!(b.total, c.total + gl.total);
        assert_eq!((b.recon_c, b.kl_c, b.recon_g, b.kl_g), (c.recon, c.kl, gl.recon, gl.kl));
    }

    #[test]
    fn all_zero_weights_give_zero() {
        let (xc, xg, p, noise, params) = batch(2);
        let w = LossWeights { recon: 0.0, kl: 0.0, mdn: 0.0, embed: 0.0 };
        assert_eq!(total_loss(&xc, &xg, &p, &params, &w, &noise).unwrap().total, 0.0);
    }

    #[test]
    fn total_recomposes_from_independent_terms() {
        let (xc, xg, p, noise, params) = batch(3);
        let w = LossWeights { recon: 0.7, kl: 1.3, mdn: 0.4, embed: 2.5 };
        let b = total_loss(&xc, &xg, &p, &params, &w, &noise).unwrap();
        assert_eq!(b.total, b.recompose(&w));

        let fc = crate::ladder::forward(&xc, &params.cond, &noise.cond).unwrap();
        let fg = crate::ladder::forward(&xg, &params.gen, &noise.gen).unwrap();
        let gmm = mdn_forward(fc.z.last().unwrap(), &params.mdn).unwrap();
        let nll = mdn_nll(fg.z.last().unwrap(), &gmm, params.config.mdn.sigma).unwrap();
        let mdn = nll.iter().sum::<f64>() / 3.0;
        let top = &fc.post.last().unwrap().mean;
        let embed = crate::embedding::embed_loss(&top.slice_cols(0, 2), &p[0]).unwrap();
        let c = dvae_loss(&xc, &params.cond, &noise.cond).unwrap();
        let gl = dvae_loss(&xg, &params.gen, &noise.gen).unwrap();
        let expect = w.recon * (c.recon + gl.recon) + w.kl * (c.kl + gl.kl) + w.mdn * mdn + w.embed * embed;
        assert!((b.total - expect).abs() < 1e-12, "{} vs {expect}", b.total);
        assert!((b.mdn - mdn).abs() < 1e-12 && (b.embed - embed).abs() < 1e-12);
    }

    #[test]
    fn gradient_factorizes_bitwise() {
        let (xc, xg, p, noise, mut params) = batch(4);
        let w = LossWeights { recon: 1.0, kl: 1.0, mdn: 0.0, embed: 0.0 };
        total_loss_grad(&xc, &xg, &p, &mut params, &w, &noise).unwrap();
        let mut alone = params.cond.clone();
        alone.zero_grad();
        dvae_loss_grad(&xc, &mut alone, &noise.cond).unwrap();
        let mut a = Vec::new();
        params.cond.visit(&mut |_, q| a.push(q.grad.clone()));
        let mut b = Vec::new();
        alone.visit(&mut |_, q| b.push(q.grad.clone()));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn full_objective_passes_grad_check() {
        let (xc, xg, p, noise, mut params) = batch(5);
        let w = LossWeights { recon: 1.0, kl: 0.8, mdn: 1.5, embed: 0.6 };
        let report = grad_check(&mut params, GradCheckConfig::default(), |pp| {
            total_loss_grad(&xc, &xg, &p, pp, &w, &noise).unwrap().total
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn stop_grad_blocks_mixture_gradient_into_cond() {
        let (xc, xg, p, noise, mut params) = batch(6);
        params.config.stop_grad_cond = true;
        let w_mdn_only = LossWeights { recon: 0.0, kl: 0.0, mdn: 1.0, embed: 0.0 };
        total_loss_grad(&xc, &xg, &p, &mut params, &w_mdn_only, &noise).unwrap();
        let mut cond_norm = 0.0;
        params.cond.visit(&mut |_, q| cond_norm += q.grad.max_abs());
        let mut gen_norm = 0.0;
        params.gen.visit(&mut |_, q| gen_norm += q.grad.max_abs());
        assert_eq!(cond_norm, 0.0);
        assert!(gen_norm > 0.0);
    }

    #[test]
    fn lower_layer_guidance() {
        let (xc, xg, _, noise, mut params) = batch(7);
        params.config.guided_layers = Some(vec![0, 1]);
        let p = vec![Tensor::full(&[3, 4], 0.1), Tensor::full(&[3, 3], -0.2)];
        let w = LossWeights { recon: 0.0, kl: 0.0, mdn: 0.0, embed: 1.0 };
        let b = total_loss(&xc, &xg, &p, &params, &w, &noise).unwrap();
        assert!(b.embed > 0.0 && b.total == b.embed);
        assert!(total_loss(&xc, &xg, &p[..1], &params, &w, &noise).is_err());
        params.config.guided_layers = Some(vec![2]);
        assert!(params.config.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.mdn.code_dim = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(LossWeights { recon: -1.0, ..LossWeights::FINAL }.validate().is_err());
        let s = serde_json::to_string(&toy_config()).unwrap();
        let back: CdvaeConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, toy_config());
        let bad = s.replacen("\"stop_grad_cond\"", "\"stop_grad\"", 1);
        assert!(serde_json::from_str::<CdvaeConfig>(&bad).is_err());
    }
}
