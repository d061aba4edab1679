//! Locality-preserving embedding of conditioning inputs and the guidance
//! loss that ties conditional codes to it.

mod features;
mod lpp;

pub use features::{build_features, feature_dim, FeatureVector, LAYOUT_GRID, PIXEL_SIDE};
pub use lpp::{lpp_fit, lpp_project, GraphWeights, LppModel, LppParams, EMBEDDING_MAGIC, EMBEDDING_VERSION};

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// Mean over the batch of `‖z − p‖²`.
pub fn embed_loss(z: &Tensor, p: &Tensor) -> Result<f64> {
    z.expect_same_shape(p, "embed_loss")?;
    let n = z.rows();
    let total: f64 = (0..n).map(|i| z.row(i).iter().zip(p.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum();
    Ok(total / n as f64)
}

/// Graph form of [`embed_loss`]; `p` enters as a constant.
pub fn embed_loss_var(g: &mut Graph, z: Var, p: &Tensor) -> Result<Var> {
    let pv = g.constant(p.clone());
    let d = g.sq_dist(z, pv)?;
    Ok(g.mean(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng, Parameter};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn known_values() {
        let p = Tensor::matrix(2, 32, vec![0.3; 64]);
        assert_eq!(embed_loss(&p, &p).unwrap(), 0.0);
        let z = p.map(|v| v + 1.0);
        assert!((embed_loss(&z, &p).unwrap() - 32.0).abs() < 1e-12);
        assert!(embed_loss(&z, &Tensor::zeros(&[2, 31])).is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut r = rng::stream(1, 0);
        let z = Tensor::matrix(7, 5, (0..35).map(|_| r.random::<f64>() * 4.0 - 2.0).collect());
        let p = Tensor::matrix(7, 5, (0..35).map(|_| r.random::<f64>() * 4.0 - 2.0).collect());
        let mut s = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                s += (z.get(i, j) - p.get(i, j)).powi(2);
            }
        }
        assert!((embed_loss(&z, &p).unwrap() - s / 7.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_twice_offset_over_batch() {
        let mut r = rng::stream(2, 0);
        let zt = Tensor::matrix(4, 3, (0..12).map(|_| r.random::<f64>()).collect());
        let p = Tensor::matrix(4, 3, (0..12).map(|_| r.random::<f64>()).collect());
        let mut z = Parameter::new(zt.clone());
        let mut g = Graph::new();
        let zv = g.param(&z);
        let l = embed_loss_var(&mut g, zv, &p).unwrap();
        assert!((g.value(l).item() - embed_loss(&zt, &p).unwrap()).abs() < 1e-15);
        let grads = g.backward(l);
        let gz = grads.get(zv).unwrap();
        for i in 0..12 {
            let expect = 2.0 * (zt.data()[i] - p.data()[i]) / 4.0;
            assert!((gz.data()[i] - expect).abs() < 1e-14);
        }
        let eps = 1e-6;
        for i in 0..12 {
            let mut up = zt.clone();
            up.data_mut()[i] += eps;
            let mut dn = zt.clone();
            dn.data_mut()[i] -= eps;
            let fd = (embed_loss(&up, &p).unwrap() - embed_loss(&dn, &p).unwrap()) / (2.0 * eps);
            assert!((fd - gz.data()[i]).abs() < 1e-7);
        }
        z.zero_grad();
    }

    proptest! {
        #[test]
        fn non_negative_and_zero_iff_equal(v in prop::collection::vec(-5.0f64..5.0, 6), w in prop::collection::vec(-5.0f64..5.0, 6)) {
            let z = Tensor::matrix(2, 3, v);
            let p = Tensor::matrix(2, 3, w);
            let l = embed_loss(&z, &p).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, z == p);
        }
    }
}
