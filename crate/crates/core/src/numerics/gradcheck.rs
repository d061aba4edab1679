use rand::seq::index::sample;

use super::param::ParamSet;
use super::rng;

/// Finite-difference comparison settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub eps: f64,
    /// Tensors larger than this are checked on a seeded random subsample.
    pub max_coords_per_tensor: usize,
    /// Denominator floor, so coordinates with near-zero gradient are judged
    /// on absolute rather than relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_tensor: 64, floor: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` must evaluate the loss deterministically and accumulate its
/// gradient into the parameters' `grad` fields. All grads are zeroed on
/// return.
pub fn grad_check<P, F>(params: &mut P, cfg: GradCheckConfig, mut loss_fn: F) -> GradCheckReport
where
    P: ParamSet + ?Sized,
    F: FnMut(&mut P) -> f64,
{
    params.zero_grad();
    loss_fn(params);
    let mut analytic = Vec::new();
    params.visit(&mut |name, p| analytic.push((name.to_string(), p.grad.clone())));
    params.zero_grad();

    let mut chooser = rng::stream(cfg.seed, rng::streams::GRAD_CHECK);
    let plan: Vec<Vec<usize>> = analytic
        .iter()
        .map(|(_, g)| {
            if g.len() <= cfg.max_coords_per_tensor {
                (0..g.len()).collect()
            } else {
                let mut idx = sample(&mut chooser, g.len(), cfg.max_coords_per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, coords_checked: 0, worst: None };
    for (t, coords) in plan.iter().enumerate() {
        for &c in coords {
            let orig = get_coord(params, t, c);
            set_coord(params, t, c, orig + cfg.eps);
            let plus = loss_fn(params);
            set_coord(params, t, c, orig - cfg.eps);
            let minus = loss_fn(params);
            set_coord(params, t, c, orig);
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[t].1.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((analytic[t].0.clone(), c, a, numeric));
            }
        }
    }
    params.zero_grad();
    report
}

fn get_coord<P: ParamSet + ?Sized>(params: &P, tensor: usize, coord: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    params.visit(&mut |_, p| {
        if i == tensor {
            out = p.value.data()[coord];
        }
        i += 1;
    });
    out
}

fn set_coord<P: ParamSet + ?Sized>(params: &mut P, tensor: usize, coord: usize, v: f64) {
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        if i == tensor {
            p.value.data_mut()[coord] = v;
        }
        i += 1;
    });
}
