use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScatteredDataset;
use crate::error::{Error, Result};
use crate::fit::{fit, par_map, FitConfig};
use crate::numerics::{
    apply_stack, rng, scoped, scoped_mut, Activation, Graph, Linear, Mlp, ParamSet, Parameter, Tensor, Var,
};

/// Fully connected conditional VAE. The code is fused into the decoder by
/// elementwise product with the conditioning tower output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeConfig {
    pub cond_dim: usize,
    pub field_dim: usize,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    #[serde(default = "default_hidden")]
    pub tower_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_code_dim() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![256]
}

fn default_slope() -> f64 {
    0.01
}

impl CvaeConfig {
    pub fn new(cond_dim: usize, field_dim: usize) -> Self {
        Self {
            cond_dim,
            field_dim,
            code_dim: default_code_dim(),
            tower_hidden: default_hidden(),
            encoder_hidden: default_hidden(),
            decoder_hidden: default_hidden(),
            leaky_slope: default_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stacks = [&self.tower_hidden, &self.encoder_hidden, &self.decoder_hidden];
        if self.cond_dim == 0 || self.field_dim == 0 || self.code_dim == 0 || stacks.iter().any(|h| h.contains(&0)) {
            return Err(Error::Config("cvae dimensions must be positive".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("cvae leaky_slope must be finite".into()));
        }
        Ok(())
    }

    fn act(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

fn dims(input: usize, hidden: &[usize], out: Option<usize>) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.extend(out);
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeParams {
    pub config: CvaeConfig,
    /// `x_c -> ... -> code_dim`, activation after every layer.
    pub tower: Mlp,
    /// `[x_g, x_c] -> hidden`.
    pub encoder: Mlp,
    pub enc_mean: Linear,
    pub enc_var: Linear,
    /// `code -> hidden`, followed by the identity output layer.
    pub decoder: Mlp,
    pub dec_out: Linear,
}

impl CvaeParams {
    pub fn init(config: &CvaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let tower = Mlp::init(&dims(c.cond_dim, &c.tower_hidden, Some(c.code_dim)), rng);
        let encoder = Mlp::init(&dims(c.field_dim + c.cond_dim, &c.encoder_hidden, None), rng);
        let eh = *c.encoder_hidden.last().unwrap_or(&(c.field_dim + c.cond_dim));
        let enc_mean = Linear::init(eh, c.code_dim, rng);
        let enc_var = Linear::init(eh, c.code_dim, rng);
        let decoder = Mlp::init(&dims(c.code_dim, &c.decoder_hidden, None), rng);
        let dh = *c.decoder_hidden.last().unwrap_or(&c.code_dim);
        let dec_out = Linear::init(dh, c.field_dim, rng);
        Ok(Self { config: config.clone(), tower, encoder, enc_mean, enc_var, decoder, dec_out })
    }
}

impl ParamSet for CvaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.tower.visit(&mut scoped("tower", f));
        self.encoder.visit(&mut scoped("encoder", f));
        self.enc_mean.visit(&mut scoped("enc_mean", f));
        self.enc_var.visit(&mut scoped("enc_var", f));
        self.decoder.visit(&mut scoped("decoder", f));
        self.dec_out.visit(&mut scoped("dec_out", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.tower.visit_mut(&mut scoped_mut("tower", f));
        self.encoder.visit_mut(&mut scoped_mut("encoder", f));
        self.enc_mean.visit_mut(&mut scoped_mut("enc_mean", f));
        self.enc_var.visit_mut(&mut scoped_mut("enc_var", f));
        self.decoder.visit_mut(&mut scoped_mut("decoder", f));
        self.dec_out.visit_mut(&mut scoped_mut("dec_out", f));
    }
}

const VAR_FLOOR: f64 = 1e-6;

fn tower(g: &mut Graph, p: &CvaeParams, x_c: Var) -> Result<Var> {
    let l = p.tower.bind(g);
    apply_stack(g, &l, p.config.act(), x_c)
}

fn decode(g: &mut Graph, p: &CvaeParams, t: Var, z: Var) -> Result<Var> {
    let fused = g.mul(t, z)?;
    let l = p.decoder.bind(g);
    let h = apply_stack(g, &l, p.config.act(), fused)?;
    p.dec_out.bind(g).apply(g, h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

fn build_loss(g: &mut Graph, x_c: &Tensor, x_g: &Tensor, p: &CvaeParams, noise: &Tensor) -> Result<(Var, Var, Var)> {
    let c = &p.config;
    x_c.expect_matrix(None, c.cond_dim, "cvae x_c")?;
    x_g.expect_matrix(Some(x_c.rows()), c.field_dim, "cvae x_g")?;
    noise.expect_matrix(Some(x_c.rows()), c.code_dim, "cvae noise")?;
    let xc = g.constant(x_c.clone());
    let xg = g.constant(x_g.clone());
    let t = tower(g, p, xc)?;
    let joint = g.concat_cols(xg, xc)?;
    let el = p.encoder.bind(g);
    let h = apply_stack(g, &el, c.act(), joint)?;
    let mean = p.enc_mean.bind(g).apply(g, h)?;
    let pre = p.enc_var.bind(g).apply(g, h)?;
    let sp = g.softplus(pre);
    let var = g.add_const(sp, VAR_FLOOR);
    let z = g.reparam(mean, var, noise.clone())?;
    let out = decode(g, p, t, z)?;
    let rd = g.sq_dist(out, xg)?;
    let recon = g.mean(rd);
    let pm = g.constant(Tensor::zeros(&[x_c.rows(), c.code_dim]));
    let pv = g.constant(Tensor::full(&[x_c.rows(), c.code_dim], 1.0));
    let kd = g.gaussian_kl(mean, var, pm, pv)?;
    let kl = g.mean(kd);
    let total = g.add(recon, kl)?;
    Ok((recon, kl, total))
}

/// Batch mean of `||decode(z) - x_g||^2 + KL(q(z | x_g, x_c) || N(0, I))`
/// with `z = mean + sqrt(var) * noise`.
pub fn cvae_loss(x_c: &Tensor, x_g: &Tensor, params: &CvaeParams, noise: &Tensor) -> Result<CvaeLoss> {
    let mut g = Graph::inference();
    let (r, k, t) = build_loss(&mut g, x_c, x_g, params, noise)?;
    Ok(CvaeLoss { recon: g.value(r).item(), kl: g.value(k).item(), total: g.value(t).item() })
}

/// As [`cvae_loss`], accumulating the gradient into `params`.
pub fn cvae_loss_grad(x_c: &Tensor, x_g: &Tensor, params: &mut CvaeParams, noise: &Tensor) -> Result<CvaeLoss> {
    let mut g = Graph::new();
    let (r, k, t) = build_loss(&mut g, x_c, x_g, params, noise)?;
    let grads = g.backward(t);
    g.write_param_grads(&grads, params);
    Ok(CvaeLoss { recon: g.value(r).item(), kl: g.value(k).item(), total: g.value(t).item() })
}

/// Initializes from `(fit.seed, INIT)` and trains with Adam. Returns the
/// parameters and the per-epoch mean loss.
pub fn cvae_train(dataset: &ScatteredDataset, config: &CvaeConfig, fit_cfg: &FitConfig) -> Result<(CvaeParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut params = CvaeParams::init(config, &mut rng::stream(fit_cfg.seed, rng::streams::INIT))?;
    let code = config.code_dim;
    let history = fit(&mut params, dataset.len(), fit_cfg, |p, idx, r| {
        let xc = dataset.x_c.select_rows(idx);
        let xg = dataset.x_g.select_rows(idx);
        let noise = rng::normal_tensor(r, idx.len(), code);
        Ok(cvae_loss_grad(&xc, &xg, p, &noise)?.total)
    })?;
    Ok((params, history))
}

/// `n` decodes with `z ~ N(0, I)`, clamped to [0, 1].
pub fn cvae_sample(x_c: &[f64], params: &CvaeParams, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if !params.all_finite() {
        return Err(Error::Domain("model parameters contain non-finite values".into()));
    }
    let c = &params.config;
    if x_c.len() != c.cond_dim {
        return Err(Error::Dimension(format!("x_c has {} values, model expects {}", x_c.len(), c.cond_dim)));
    }
    let z = rng::normal_tensor(rng, n, c.code_dim);
    let tiled: Vec<f64> = (0..n).flat_map(|_| x_c.iter().copied()).collect();
    let mut g = Graph::inference();
    let xc = g.constant(Tensor::matrix(n, c.cond_dim, tiled));
    let t = tower(&mut g, params, xc)?;
    let zv = g.constant(z);
    let out = decode(&mut g, params, t, zv)?;
    Ok(g.value(out).map(|v| v.clamp(0.0, 1.0)))
}

/// One pool per row of `x_c`, seeded per row like the main model's pools.
pub fn cvae_sample_pools(params: &CvaeParams, x_c: &Tensor, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    par_map(x_c.rows(), |r| {
        let mut rr = rng::stream(seed, rng::streams::SAMPLE_ROW_BASE + r as u64);
        cvae_sample(x_c.row(r), params, n, &mut rr)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec, SyntheticTask};
    use crate::numerics::{grad_check, GradCheckConfig};

    fn toy() -> CvaeConfig {
        CvaeConfig {
            cond_dim: 3,
            field_dim: 4,
            code_dim: 5,
            tower_hidden: vec![6],
            encoder_hidden: vec![7],
            decoder_hidden: vec![6],
            leaky_slope: 0.1,
        }
    }

    fn batch(seed: u64, b: usize) -> (Tensor, Tensor, Tensor, CvaeParams) {
        let mut r = rng::stream(seed, 0);
        let xc = rng::normal_tensor(&mut r, b, 3);
        let xg = rng::normal_tensor(&mut r, b, 4);
        let noise = rng::normal_tensor(&mut r, b, 5);
        let p = CvaeParams::init(&toy(), &mut r).unwrap();
        (xc, xg, noise, p)
    }

    #[test]
    fn default_code_dim_is_64() {
        let c = CvaeConfig::new(80, 1024);
        assert_eq!(c.code_dim, 64);
        let p = CvaeParams::init(&c, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(p.tower.out_dim(80), 64);
    }

    #[test]
    fn gradient_passes_check() {
        let (xc, xg, noise, mut p) = batch(1, 4);
        let report = grad_check(&mut p, GradCheckConfig::default(), |pp| {
            cvae_loss_grad(&xc, &xg, pp, &noise).unwrap().total
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn loss_matches_manual_terms() {
        let (xc, xg, noise, p) = batch(2, 3);
        let l = cvae_loss(&xc, &xg, &p, &noise).unwrap();
        assert!((l.total - l.recon - l.kl).abs() < 1e-12);
        assert!(l.kl >= 0.0 && l.recon >= 0.0);
        let zero = Tensor::zeros(&[3, 5]);
        let a = cvae_loss(&xc, &xg, &p, &zero).unwrap();
        let b = cvae_loss(&xc, &xg, &p, &zero).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_term_matches_closed_form() {
        let (xc, xg, noise, p) = batch(3, 2);
        let l = cvae_loss(&xc, &xg, &p, &noise).unwrap();
        let act = |v: f64| if v < 0.0 { 0.1 * v } else { v };
        let dense = |x: &[f64], lin: &Linear| -> Vec<f64> {
            (0..lin.fan_out())
                .map(|j| lin.b.value.data()[j] + (0..lin.fan_in()).map(|i| x[i] * lin.w.value.get(i, j)).sum::<f64>())
                .collect()
        };
        let mut kl = 0.0;
        for r in 0..2 {
            let mut joint = xg.row(r).to_vec();
            joint.extend_from_slice(xc.row(r));
            let h: Vec<f64> = dense(&joint, &p.encoder.layers[0]).into_iter().map(act).collect();
            let m = dense(&h, &p.enc_mean);
            let v: Vec<f64> = dense(&h, &p.enc_var).into_iter().map(|s| s.max(0.0) + (-s.abs()).exp().ln_1p() + VAR_FLOOR).collect();
            kl += m.iter().zip(&v).map(|(m, v)| 0.5 * (v + m * m - 1.0 - v.ln())).sum::<f64>();
        }
        assert!((l.kl - kl / 2.0).abs() < 1e-10, "{} vs {}", l.kl, kl / 2.0);
    }

    #[test]
    fn zero_epochs_keep_init_and_training_is_seeded() {
        let ds = generate(&SyntheticSpec { task: SyntheticTask::Toy1d, n: 64, modes: 2, noise: 0.02, seed: 1, side: 2 }).unwrap();
        let mut cfg = CvaeConfig::new(ds.x_c.cols(), ds.field_dim());
        cfg.tower_hidden = vec![8];
        cfg.encoder_hidden = vec![8];
        cfg.decoder_hidden = vec![8];
        cfg.code_dim = 4;
        let f0 = FitConfig { epochs: 0, ..FitConfig::default() };
        let (p0, h0) = cvae_train(&ds, &cfg, &f0).unwrap();
        assert!(h0.is_empty());
        assert_eq!(p0, CvaeParams::init(&cfg, &mut rng::stream(0, rng::streams::INIT)).unwrap());
        let f = FitConfig { epochs: 30, lr: 3e-3, batch_size: 16, seed: 0 };
        let (p1, h1) = cvae_train(&ds, &cfg, &f).unwrap();
        let (p2, h2) = cvae_train(&ds, &cfg, &f).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert!(h1.last().unwrap() < &h1[0], "{h1:?}");
    }

    #[test]
    fn sampling_is_seeded_and_pure() {
        let (_, _, _, p) = batch(4, 1);
        let before = p.clone();
        let x = [0.1, 0.5, 0.9];
        let a = cvae_sample(&x, &p, 1, &mut rng::stream(8, 0)).unwrap();
        assert_eq!(a, cvae_sample(&x, &p, 1, &mut rng::stream(8, 0)).unwrap());
        let many = cvae_sample(&x, &p, 20, &mut rng::stream(9, 0)).unwrap();
        assert_eq!(many.shape(), &[20, 4]);
        assert!(many.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p, before);
        let pools = cvae_sample_pools(&p, &Tensor::matrix(2, 3, vec![0.1, 0.5, 0.9, 0.0, 0.0, 0.0]), 3, 5).unwrap();
        assert_eq!(pools.len(), 2);
    }

    #[test]
    fn empty_and_bad_inputs() {
        let ds = ScatteredDataset::new(Tensor::zeros(&[0, 1]), Tensor::zeros(&[0, 1]), Tensor::zeros(&[0, 1]), toy_meta()).unwrap();
        let cfg = CvaeConfig::new(1, 1);
        assert!(matches!(cvae_train(&ds, &cfg, &FitConfig::default()), Err(Error::Parameter(_))));
        let (_, _, _, p) = batch(5, 1);
        assert!(matches!(cvae_sample(&[0.0; 2], &p, 1, &mut rng::stream(0, 0)), Err(Error::Dimension(_))));
    }

    fn toy_meta() -> crate::data::DatasetMeta {
        crate::data::DatasetMeta { task: "toy1d".into(), side: 1, generator: None, source: None, has_labels: false }
    }
}
