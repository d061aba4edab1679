//! `CDVC` checkpoint container: named tensors, optimizer state, epoch
//! counter, loss history and a JSON metadata blob.
//!
//! Layout (little-endian): magic, `u32` version, metadata string, tensor
//! count and `(name, ndim, dims, data)` records, Adam state count and
//! `(step, lr, beta1, beta2, eps, weight_decay, m, v)` records, `u64` epoch,
//! history `(rows, cols, data)`. Strings are `u64` length + UTF-8.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON describing the producing config, schedule and seed.
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
    /// One entry per tensor in `tensors` when present; empty otherwise.
    pub adam: Vec<AdamState>,
    pub epoch: u64,
    pub history: Tensor,
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u64(t.shape().len() as u64);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut Reader<'_>, what: &str) -> Result<Tensor> {
    let ndim = r.len(what)?;
    if ndim > 8 {
        return r.fail(format!("{what}: implausible rank {ndim}"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = r.len(what)?;
        count = match count.checked_mul(d) {
            Some(c) => c,
            None => return r.fail(format!("{what}: size overflows")),
        };
        shape.push(d);
    }
    let data = r.f64s(count, what)?;
    Tensor::new(shape, data).or_else(|e| r.fail(e.to_string()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.meta);
        w.u64(self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            w.str(name);
            write_tensor(&mut w, t);
        }
        w.u64(self.adam.len() as u64);
        for s in &self.adam {
            w.u64(s.step_count);
            for v in [s.lr, s.beta1, s.beta2, s.eps, s.weight_decay] {
                w.f64(v);
            }
            write_tensor(&mut w, &s.first_moment);
            write_tensor(&mut w, &s.second_moment);
        }
        w.u64(self.epoch);
        write_tensor(&mut w, &self.history);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta = r.str("metadata")?;
        let n = r.len("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.str("tensor name")?;
            let t = read_tensor(&mut r, &name)?;
            tensors.push((name, t));
        }
        let at = r.offset();
        let na = r.len("optimizer state count")?;
        if na != 0 && na != n {
            return Err(Error::Format { offset: at, message: format!("{na} optimizer states for {n} tensors") });
        }
        let mut adam = Vec::with_capacity(na);
        for i in 0..na {
            let step_count = r.u64("adam step")?;
            let mut h = [0.0; 5];
            for v in &mut h {
                *v = r.f64("adam hyperparameter")?;
            }
            let first_moment = read_tensor(&mut r, "adam first moment")?;
            let second_moment = read_tensor(&mut r, "adam second moment")?;
            if first_moment.shape() != tensors[i].1.shape() || second_moment.shape() != tensors[i].1.shape() {
                return r.fail(format!("optimizer state shape differs from `{}`", tensors[i].0));
            }
            adam.push(AdamState {
                first_moment,
                second_moment,
                step_count,
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                weight_decay: h[4],
            });
        }
        let epoch = r.u64("epoch")?;
        let history = read_tensor(&mut r, "history")?;
        r.finish()?;
        Ok(Self { meta, tensors, adam, epoch, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameter values by name, in visit order.
pub fn export_params<P: ParamSet + ?Sized>(params: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.visit(&mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

/// Overwrites `params` from `tensors`; names, order and shapes must match.
pub fn import_params<P: ParamSet + ?Sized>(params: &mut P, tensors: &[(String, Tensor)]) -> Result<()> {
    let expected = export_params(params);
    if expected.len() != tensors.len() {
        return Err(Error::Parameter(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((en, et), (gn, gt)) in expected.iter().zip(tensors) {
        if en != gn || et.shape() != gt.shape() {
            return Err(Error::Parameter(format!(
                "checkpoint tensor `{gn}` {:?} does not match model tensor `{en}` {:?}",
                gt.shape(),
                et.shape()
            )));
        }
    }
    let mut it = tensors.iter();
    params.visit_mut(&mut |_, p| {
        p.value = it.next().expect("counted above").1.clone();
        p.zero_grad();
    });
    Ok(())
}
