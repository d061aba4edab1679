use rand::Rng;

use super::{CdvaeParams, DecodePath};
use crate::error::{Error, Result};
use crate::fit::par_map;
use crate::ladder::{upward_pass, DvaeParams, LadderNoise};
use crate::mdn::{mdn_forward, mdn_sample};
use crate::numerics::{rng, Graph, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeSide {
    Conditional,
    Generative,
}

/// Top-layer posterior mean along the noise-free path, one row per input.
/// The top posterior equals the bottom-up statistics, so only the upward
/// pass runs.
pub fn encode_code(x: &Tensor, params: &CdvaeParams, side: CodeSide) -> Result<Tensor> {
    let dvae = match side {
        CodeSide::Conditional => &params.cond,
        CodeSide::Generative => &params.gen,
    };
    Ok(upward_pass(x, dvae)?.pop().expect("at least one layer").mean)
}

fn decode(dvae: &DvaeParams, z_top: Tensor, noise: Option<&LadderNoise>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let vars = dvae.bind(&mut g);
    let z = g.constant(z_top);
    let recon = vars.decode_from_top(&mut g, z, noise)?;
    Ok(g.value(recon.mean).clone())
}

fn check_params(params: &CdvaeParams) -> Result<()> {
    if !params.all_finite() {
        return Err(Error::Domain("model parameters contain non-finite values".into()));
    }
    Ok(())
}

/// `n` generated fields for one conditioning field: mixture samples of the
/// generative top code decoded through the generative ladder, clamped to
/// [0, 1]. Draws all `n` codes first, then the intermediate-layer noise.
pub fn conditional_sample(x_c: &[f64], params: &CdvaeParams, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    check_params(params)?;
    let zc = encode_code(&Tensor::matrix(1, x_c.len(), x_c.to_vec()), params, CodeSide::Conditional)?;
    let gmm = mdn_forward(&zc, &params.mdn)?.pop().expect("one row");
    let sigma = params.config.mdn.sigma;
    let dim = gmm.dim();
    let mut codes = Vec::with_capacity(n * dim);
    for _ in 0..n {
        codes.extend(mdn_sample(&gmm, sigma, rng));
    }
    let noise = match params.config.decode_path {
        DecodePath::Sampled => Some(LadderNoise::sample(&params.config.gen, n, rng)),
        DecodePath::Mean => None,
    };
    let out = decode(&params.gen, Tensor::matrix(n, dim, codes), noise.as_ref())?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Conditional decoder output for the conditional code, used as the detail
/// map reference. Mean path, unclamped.
pub fn cond_reconstruction(x_c: &Tensor, params: &CdvaeParams) -> Result<Tensor> {
    let zc = encode_code(x_c, params, CodeSide::Conditional)?;
    decode(&params.cond, zc, None)
}

/// One pool of `n` samples per row of `x_c`. Row `r` uses its own stream
/// `(seed, SAMPLE_ROW_BASE + r)`, so results do not depend on the worker
/// count.
pub fn sample_pools(params: &CdvaeParams, x_c: &Tensor, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    check_params(params)?;
    par_map(x_c.rows(), |r| {
        let mut rr = rng::stream(seed, rng::streams::SAMPLE_ROW_BASE + r as u64);
        conditional_sample(x_c.row(r), params, n, &mut rr)
    })
}
