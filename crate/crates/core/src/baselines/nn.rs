use crate::data::ScatteredDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;

/// Paired training matrices searched by Euclidean distance on `x_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct NnIndex {
    x_c: Tensor,
    x_g: Tensor,
    side: usize,
}

impl NnIndex {
    /// `side` is the edge of the square generated field used for blurring.
    pub fn new(x_c: Tensor, x_g: Tensor, side: usize) -> Result<Self> {
        if x_c.rows() != x_g.rows() {
            return Err(Error::Dimension(format!("x_c has {} rows, x_g has {}", x_c.rows(), x_g.rows())));
        }
        if x_g.cols() != side * side {
            return Err(Error::Dimension(format!("field of {} values is not {side}x{side}", x_g.cols())));
        }
        Ok(Self { x_c, x_g, side })
    }

    pub fn from_dataset(ds: &ScatteredDataset) -> Result<Self> {
        Self::new(ds.x_c.clone(), ds.x_g.clone(), ds.meta.side)
    }

    pub fn len(&self) -> usize {
        self.x_c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Indices of the `k` nearest rows, nearest first, ties to the lower index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if query.len() != self.x_c.cols() {
            return Err(Error::Dimension(format!("query has {} values, index expects {}", query.len(), self.x_c.cols())));
        }
        if k > self.len() {
            return Err(Error::Parameter(format!("k = {k} exceeds index size {}", self.len())));
        }
        let mut d: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (self.x_c.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d[..k].iter().map(|&(_, i)| i).collect())
    }
}

/// The generated fields of the `k` nearest training inputs, each blurred.
pub fn nn_predict(x_c: &[f64], index: &NnIndex, k: usize, blur_sigma: f64) -> Result<Tensor> {
    let ids = index.nearest(x_c, k)?;
    let d = index.x_g.cols();
    let mut out = Vec::with_capacity(k * d);
    for i in ids {
        out.extend(gaussian_blur(index.x_g.row(i), index.side, blur_sigma)?);
    }
    Ok(Tensor::matrix(k, d, out))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur of a `side x side` field with half-sample
/// symmetric padding; the kernel spans `ceil(4 sigma)` pixels each way and
/// is normalized. `sigma = 0` is the identity.
pub fn gaussian_blur(field: &[f64], side: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be finite and non-negative")));
    }
    if field.len() != side * side {
        return Err(Error::Dimension(format!("field of {} values is not {side}x{side}", field.len())));
    }
    if sigma == 0.0 || side == 0 {
        return Ok(field.to_vec());
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);

    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for r in 0..side {
            for c in 0..side {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let t = j as isize - radius;
                    let idx = if horizontal {
                        r * side + reflect(c as isize + t, side)
                    } else {
                        reflect(r as isize + t, side) * side + c
                    };
                    acc += w * src[idx];
                }
                dst[r * side + c] = acc;
            }
        }
        dst
    };
    Ok(pass(&pass(field, true), false))
}
