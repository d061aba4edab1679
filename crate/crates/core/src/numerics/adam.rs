use serde::{Deserialize, Serialize};

use super::param::{ParamSet, Parameter};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty coefficient folded into the gradient before the update.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(param: &Parameter, cfg: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(param.value.shape()),
            second_moment: Tensor::zeros(param.value.shape()),
            step_count: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update; the gradient is zeroed afterwards.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, wd) = (state.beta1, state.beta2, state.weight_decay);
    let values = param.value.data_mut();
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (i, g) in param.grad.data_mut().iter_mut().enumerate() {
        let gi = *g + wd * values[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        *g = 0.0;
    }
}

/// Adam over a whole [`ParamSet`], one state per parameter in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(params: &P, cfg: AdamConfig) -> Self {
        let mut states = Vec::new();
        params.visit(&mut |_, p| states.push(AdamState::new(p, cfg)));
        Self { states }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P) {
        let mut it = self.states.iter_mut();
        params.visit_mut(&mut |name, p| {
            let s = it.next().unwrap_or_else(|| panic!("no optimizer state for `{name}`"));
            adam_step(p, s);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new(Tensor::matrix(1, 1, vec![v]))
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = Parameter::new(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]));
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &mut s);
        assert_eq!(p.value.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new(Tensor::matrix(1, 3, vec![0.0; 3]));
        p.grad = Tensor::matrix(1, 3, vec![0.5, -7.0, 1e-3]);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &mut s);
        let expect = [-0.01, 0.01, -0.01];
        for (v, e) in p.value.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
        assert_eq!(p.grad.data(), &[0.0; 3]);
        assert!(s.second_moment.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let w = p.value.item();
            p.grad = Tensor::matrix(1, 1, vec![2.0 * (w - 3.0)]);
            adam_step(&mut p, &mut s);
        }
        assert!((p.value.item() - 3.0).abs() < 0.01, "w = {}", p.value.item());
    }
}
