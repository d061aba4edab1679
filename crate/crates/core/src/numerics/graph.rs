//! Reverse-mode gradients over the small operation set the models need.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that made it. [`Graph::backward`] then walks the record
//! in reverse, accumulating gradients in a fixed order so results are
//! bitwise reproducible.

use std::f64::consts::PI;

use super::param::{ParamSet, Parameter};
use super::tensor::{gemm, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f64 },
    Softplus { x: Var },
    Tanh { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Recip(Var),
    Scale(Var, f64),
    AddConst(Var),
    Reparam { mean: Var, var: Var, noise: Tensor },
    GaussianNll { x: Var, mean: Var, var: Var },
    GaussianKl { qm: Var, qv: Var, pm: Var, pv: Var },
    SqDist(Var, Var),
    MdnNll { z: Var, means: Var, logits: Var, sigma: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Mean(Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    track: bool,
}

/// Gradients of one scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that tracks gradients for bound parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), track: true }
    }

    /// A graph for forward evaluation only; parameters are bound as constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), track: false }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.track });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter as a differentiable leaf. Binding order is the
    /// order in which [`Graph::write_param_grads`] hands gradients back.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, fan_in) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.rows() != fan_in || bv.len() != wv.cols() {
            return dim_err(format!(
                "affine: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let fan_out = wv.cols();
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bv.data());
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            xv.data(),
            (fan_in as isize, 1),
            wv.data(),
            (fan_out as isize, 1),
            1.0,
            &mut out,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::matrix(batch, fan_out, out), Op::Affine { x, w, b }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(y, Op::Softplus { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(y, Op::Tanh { x }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(format!("{what}: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Mul(a, b), ng))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / v);
        let ng = self.ng(x);
        self.push(y, Op::Recip(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| s * v);
        let ng = self.ng(x);
        self.push(y, Op::Scale(x, s), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(y, Op::AddConst(x), ng)
    }

    /// `mean + noise * sqrt(var)`; `noise` is held fixed.
    pub fn reparam(&mut self, mean: Var, var: Var, noise: Tensor) -> Result<Var> {
        let (mv, vv) = (self.value(mean), self.value(var));
        mv.expect_same_shape(vv, "reparam mean/var")?;
        mv.expect_same_shape(&noise, "reparam noise")?;
        if let Some(bad) = vv.data().iter().find(|&&v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(crate::Error::Domain(format!("reparam: variance {bad} is not positive")));
        }
        let y = Tensor::matrix(
            mv.rows(),
            mv.cols(),
            mv.data()
                .iter()
                .zip(vv.data())
                .zip(noise.data())
                .map(|((&m, &v), &e)| m + e * v.sqrt())
                .collect(),
        );
        let ng = self.ng(mean) || self.ng(var);
        Ok(self.push(y, Op::Reparam { mean, var, noise }, ng))
    }

    /// Per-row diagonal Gaussian negative log-density, shape `[batch, 1]`.
    pub fn gaussian_nll(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let (xv, mv, vv) = (self.value(x), self.value(mean), self.value(var));
        xv.expect_same_shape(mv, "gaussian_nll x/mean")?;
        xv.expect_same_shape(vv, "gaussian_nll x/var")?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let mut s = 0.0;
            for ((&xi, &mi), &vi) in xv.row(i).iter().zip(mv.row(i)).zip(vv.row(i)) {
                let d = xi - mi;
                s += 0.5 * ((2.0 * PI).ln() + vi.ln() + d * d / vi);
            }
            out.push(s);
        }
        let _ = c;
        let ng = self.ng(x) || self.ng(mean) || self.ng(var);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::GaussianNll { x, mean, var }, ng))
    }

    /// Per-row KL(q || p) between diagonal Gaussians, shape `[batch, 1]`.
    pub fn gaussian_kl(&mut self, qm: Var, qv: Var, pm: Var, pv: Var) -> Result<Var> {
        let (a, b, c, d) = (self.value(qm), self.value(qv), self.value(pm), self.value(pv));
        a.expect_same_shape(b, "gaussian_kl q")?;
        a.expect_same_shape(c, "gaussian_kl q/p")?;
        a.expect_same_shape(d, "gaussian_kl p")?;
        let r = a.rows();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..a.cols() {
                s += kl_term(a.get(i, j), b.get(i, j), c.get(i, j), d.get(i, j));
            }
            out.push(s);
        }
        let ng = self.ng(qm) || self.ng(qv) || self.ng(pm) || self.ng(pv);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::GaussianKl { qm, qv, pm, pv }, ng))
    }

    /// Per-row squared Euclidean distance, shape `[batch, 1]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv, "sq_dist")?;
        let out = (0..av.rows())
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(av.rows(), 1, out), Op::SqDist(a, b), ng))
    }

    /// Per-row negative log-likelihood of `z` under an isotropic Gaussian
    /// mixture with softmax(`logits`) weights, component means packed
    /// component-major in `means` (`[batch, K * dim]`), and fixed `sigma`.
    pub fn mdn_nll(&mut self, z: Var, means: Var, logits: Var, sigma: f64) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(means), self.value(logits));
        let (r, d, k) = (zv.rows(), zv.cols(), lv.cols());
        if mv.rows() != r || lv.rows() != r || mv.cols() != k * d {
            return dim_err(format!(
                "mdn_nll: z {:?}, means {:?}, logits {:?}",
                zv.shape(),
                mv.shape(),
                lv.shape()
            ));
        }
        if sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(crate::Error::Domain(format!("mdn_nll: sigma {sigma} must be positive")));
        }
        let out = (0..r)
            .map(|i| mixture_row(zv.row(i), mv.row(i), lv.row(i), sigma).nll)
            .collect();
        let ng = self.ng(z) || self.ng(means) || self.ng(logits);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::MdnNll { z, means, logits, sigma }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice_cols(start, end);
        let ng = self.ng(x);
        self.push(y, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return dim_err(format!("concat_cols: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, ca + cb, data), Op::ConcatCols(a, b), ng))
    }

    /// Mean over all elements, as a `[1, 1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(y, Op::Mean(x), ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, fan_in, fan_out) = (xv.rows(), xv.cols(), wv.cols());
                if self.ng(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    gemm(
                        batch,
                        fan_out,
                        fan_in,
                        1.0,
                        g.data(),
                        (fan_out as isize, 1),
                        wv.data(),
                        (1, fan_out as isize),
                        0.0,
                        &mut dx,
                    );
                    self.acc(grads, *x, Tensor::matrix(batch, fan_in, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    gemm(
                        fan_in,
                        batch,
                        fan_out,
                        1.0,
                        xv.data(),
                        (1, fan_in as isize),
                        g.data(),
                        (fan_out as isize, 1),
                        0.0,
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).expect("dw shape"));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; fan_out];
                    for r in 0..batch {
                        for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::new(shape, db).expect("db shape"));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv >= 0.0 { gv } else { slope * gv })
                    .expect("same shape");
                self.acc(grads, *x, dx);
            }
            Op::Softplus { x } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv * sigmoid(xv)).expect("same shape");
                self.acc(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = y.zip_map(g, |yv, gv| gv * (1.0 - yv * yv)).expect("same shape");
                self.acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |gv, bv| gv * bv).expect("same shape"));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(av, |gv, av| gv * av).expect("same shape"));
                }
            }
            Op::Recip(x) => {
                let dx = y.zip_map(g, |yv, gv| -gv * yv * yv).expect("same shape");
                self.acc(grads, *x, dx);
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| s * v)),
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::Reparam { mean, var, noise } => {
                self.acc(grads, *mean, g.clone());
                if self.ng(*var) {
                    let vv = self.value(*var);
                    let data = g
                        .data()
                        .iter()
                        .zip(vv.data())
                        .zip(noise.data())
                        .map(|((&gv, &v), &e)| gv * e * 0.5 / v.sqrt())
                        .collect();
                    self.acc(grads, *var, Tensor::new(vv.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::GaussianNll { x, mean, var } => {
                let (xv, mv, vv) = (self.value(*x), self.value(*mean), self.value(*var));
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; r * c];
                let mut dv = vec![0.0; r * c];
                for i in 0..r {
                    let gr = g.get(i, 0);
                    for j in 0..c {
                        let k = i * c + j;
                        let (d, v) = (xv.data()[k] - mv.data()[k], vv.data()[k]);
                        dx[k] = gr * d / v;
                        dv[k] = gr * 0.5 * (1.0 / v - d * d / (v * v));
                    }
                }
                if self.ng(*mean) {
                    self.acc(grads, *mean, Tensor::matrix(r, c, dx.iter().map(|v| -v).collect()));
                }
                self.acc(grads, *x, Tensor::matrix(r, c, dx));
                self.acc(grads, *var, Tensor::matrix(r, c, dv));
            }
            Op::GaussianKl { qm, qv, pm, pv } => {
                let (a, b, c, d) = (self.value(*qm), self.value(*qv), self.value(*pm), self.value(*pv));
                let (r, n) = (a.rows(), a.cols());
                let mut dqm = vec![0.0; r * n];
                let mut dqv = vec![0.0; r * n];
                let mut dpv = vec![0.0; r * n];
                for i in 0..r {
                    let gr = g.get(i, 0);
                    for j in 0..n {
                        let k = i * n + j;
                        let (m1, v1, m2, v2) = (a.data()[k], b.data()[k], c.data()[k], d.data()[k]);
                        let diff = m1 - m2;
                        dqm[k] = gr * diff / v2;
                        dqv[k] = gr * 0.5 * (1.0 / v2 - 1.0 / v1);
                        dpv[k] = gr * 0.5 * (1.0 / v2 - (v1 + diff * diff) / (v2 * v2));
                    }
                }
                if self.ng(*pm) {
                    self.acc(grads, *pm, Tensor::matrix(r, n, dqm.iter().map(|v| -v).collect()));
                }
                self.acc(grads, *qm, Tensor::matrix(r, n, dqm));
                self.acc(grads, *qv, Tensor::matrix(r, n, dqv));
                self.acc(grads, *pv, Tensor::matrix(r, n, dpv));
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, c) = (av.rows(), av.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let gr = g.get(i, 0);
                    for j in 0..c {
                        da[i * c + j] = 2.0 * gr * (av.get(i, j) - bv.get(i, j));
                    }
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::matrix(r, c, da.iter().map(|v| -v).collect()));
                }
                self.acc(grads, *a, Tensor::matrix(r, c, da));
            }
            Op::MdnNll { z, means, logits, sigma } => {
                let (zv, mv, lv) = (self.value(*z), self.value(*means), self.value(*logits));
                let (r, d, k) = (zv.rows(), zv.cols(), lv.cols());
                let s2 = sigma * sigma;
                let mut dz = vec![0.0; r * d];
                let mut dm = vec![0.0; r * k * d];
                let mut dl = vec![0.0; r * k];
                for i in 0..r {
                    let gr = g.get(i, 0);
                    let row = mixture_row(zv.row(i), mv.row(i), lv.row(i), *sigma);
                    for c in 0..k {
                        dl[i * k + c] = gr * (row.weights[c] - row.resp[c]);
                        for j in 0..d {
                            let diff = zv.get(i, j) - mv.get(i, c * d + j);
                            let t = gr * row.resp[c] * diff / s2;
                            dz[i * d + j] += t;
                            dm[i * k * d + c * d + j] = -t;
                        }
                    }
                }
                self.acc(grads, *z, Tensor::matrix(r, d, dz));
                self.acc(grads, *means, Tensor::matrix(r, k * d, dm));
                self.acc(grads, *logits, Tensor::matrix(r, k, dl));
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let (r, c, w) = (xv.rows(), xv.cols(), g.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    self.acc(grads, *x, Tensor::matrix(r, c, dx));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                self.acc(grads, *a, g.slice_cols(0, ca));
                self.acc(grads, *b, g.slice_cols(ca, g.cols()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.len() as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), s));
            }
        }
    }

    /// Adds the gradients of bound parameters into `params`, which must be
    /// the set whose parameters were bound, visited in binding order.
    pub fn write_param_grads<P: ParamSet + ?Sized>(&self, grads: &Grads, params: &mut P) {
        let mut it = self.params.iter();
        params.visit_mut(&mut |name, p| {
            let v = *it.next().unwrap_or_else(|| panic!("parameter `{name}` was never bound"));
            assert_eq!(
                self.value(v).shape(),
                p.value.shape(),
                "binding order mismatch at `{name}`"
            );
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        });
        assert!(it.next().is_none(), "graph bound more parameters than the set holds");
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn kl_term(qm: f64, qv: f64, pm: f64, pv: f64) -> f64 {
    let d = qm - pm;
    0.5 * ((pv / qv).ln() + (qv + d * d) / pv - 1.0)
}

pub(crate) struct MixtureRow {
    pub nll: f64,
    pub weights: Vec<f64>,
    pub resp: Vec<f64>,
}

/// Log-sum-exp evaluation of one mixture likelihood; also returns the
/// softmax weights and posterior responsibilities used by the backward pass.
pub(crate) fn mixture_row(z: &[f64], means: &[f64], logits: &[f64], sigma: f64) -> MixtureRow {
    let d = z.len();
    let k = logits.len();
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_logits = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let log_norm = -0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln();
    let mut a = Vec::with_capacity(k);
    for c in 0..k {
        let sq: f64 = z.iter().zip(&means[c * d..(c + 1) * d]).map(|(x, m)| (x - m) * (x - m)).sum();
        a.push(logits[c] - lse_logits + log_norm - sq / (2.0 * sigma * sigma));
    }
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = a.iter().map(|v| (v - amax).exp()).sum();
    let lse = amax + sum.ln();
    MixtureRow {
        nll: -lse,
        weights: logits.iter().map(|l| (l - lse_logits).exp()).collect(),
        resp: a.iter().map(|v| (v - lse).exp()).collect(),
    }
}
