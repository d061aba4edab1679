use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding parameters in a fixed visiting order.
///
/// The order is load-bearing: graph binding, optimizer state and checkpoint
/// layout all follow it.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, p| ok &= p.value.all_finite());
        ok
    }

    /// `(name, tensor)` pairs of the current values.
    fn named_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }
}

/// Prefixes nested parameter names: `prefix/child`.
pub(crate) fn scoped<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &Parameter),
) -> impl FnMut(&str, &Parameter) + 'a {
    move |name, p| f(&format!("{prefix}/{name}"), p)
}

pub(crate) fn scoped_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut Parameter),
) -> impl FnMut(&str, &mut Parameter) + 'a {
    move |name, p| f(&format!("{prefix}/{name}"), p)
}

/// Fully connected layer `y = x W + b`, `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// Uniform Glorot initialization for weights, zero biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Self {
            w: Parameter::new(Tensor::matrix(fan_in, fan_out, w)),
            b: Parameter::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Parameter::new(Tensor::zeros(&[fan_in, fan_out])),
            b: Parameter::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn from_values(w: Tensor, b: Tensor) -> Self {
        Self { w: Parameter::new(w), b: Parameter::new(b) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> LinearVars {
        LinearVars { w: g.param(&self.w), b: g.param(&self.b) }
    }
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.w, self.b)
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for (i, item) in self.iter().enumerate() {
            let prefix = i.to_string();
            item.visit(&mut scoped(&prefix, f));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, item) in self.iter_mut().enumerate() {
            let prefix = i.to_string();
            item.visit_mut(&mut scoped_mut(&prefix, f));
        }
    }
}

/// Hidden-layer nonlinearity used by the stacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// A stack of affine layers, each followed by the same activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; a single-element `dims` is the identity.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self { layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, Linear::fan_out)
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(g)).collect()
    }
}

pub fn apply_stack(g: &mut Graph, layers: &[LinearVars], act: Activation, mut x: Var) -> Result<Var> {
    for l in layers {
        let h = l.apply(g, x)?;
        x = act.apply(g, h);
    }
    Ok(x)
}

impl ParamSet for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.layers.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.layers.visit_mut(f);
    }
}
