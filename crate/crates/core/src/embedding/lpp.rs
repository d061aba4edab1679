//! Locality preserving projections.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::binio::{product, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CDVE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphWeights {
    Binary,
    /// `exp(-d^2 / t)`; `t` defaults to the mean squared neighbor distance.
    Heat { t: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LppParams {
    pub k: usize,
    pub embed_dim: usize,
    pub weights: GraphWeights,
}

impl Default for LppParams {
    fn default() -> Self {
        Self { k: 10, embed_dim: 32, weights: GraphWeights::Binary }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LppModel {
    pub n_train: usize,
    pub k: usize,
    pub weights: GraphWeights,
    /// Generalized eigenvectors as columns, `[feature_dim, embed_dim]`.
    pub projection: Tensor,
    pub mean: Vec<f64>,
    /// Population std of each raw output dimension over the training rows.
    pub scales: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Ridge added to `XᵀDX` when it was rank-deficient, else 0.
    pub reg_eps: f64,
    /// Largest `‖XᵀLXa − λXᵀDXa‖ / ‖a‖` over the kept eigenpairs.
    pub max_residual: f64,
}

/// Undirected k-nearest-neighbor graph as adjacency lists with weights,
/// each list sorted by neighbor index.
fn knn_graph(x: &Tensor, k: usize, weights: GraphWeights) -> Vec<Vec<(usize, f64)>> {
    let n = x.rows();
    let sq = |i: usize, j: usize| -> f64 { x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq(i, j), j)));
        cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in &cand[..k] {
            edges[i].push((j, d2));
            edges[j].push((i, d2));
        }
    }
    for list in &mut edges {
        list.sort_by(|a, b| a.0.cmp(&b.0));
        list.dedup_by_key(|e| e.0);
    }
    let t = match weights {
        GraphWeights::Binary => None,
        GraphWeights::Heat { t: Some(t) } => Some(t),
        GraphWeights::Heat { t: None } => {
            let (s, c) = edges.iter().flatten().fold((0.0, 0usize), |(s, c), e| (s + e.1, c + 1));
            Some(if s > 0.0 { s / c as f64 } else { 1.0 })
        }
    };
    for list in &mut edges {
        for e in list.iter_mut() {
            e.1 = t.map_or(1.0, |t| (-e.1 / t).exp());
        }
    }
    edges
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// `(XᵀLX, XᵀDX)` for centered rows `x` and graph `edges`.
fn laplacian_forms(x: &Tensor, edges: &[Vec<(usize, f64)>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = x.cols();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, d);
    for (i, list) in edges.iter().enumerate() {
        let xi = x.row(i);
        let deg: f64 = list.iter().map(|e| e.1).sum();
        for p in 0..d {
            for q in 0..d {
                b[(p, q)] += deg * xi[p] * xi[q];
            }
        }
        for &(j, w) in list {
            let xj = x.row(j);
            for p in 0..d {
                for q in 0..d {
                    a[(p, q)] -= w * xi[p] * xj[q];
                }
            }
        }
    }
    a += &b;
    (a, b)
}

/// Fits the projection; see [`LppModel`].
///
/// Eigenvectors whose training projection has no variance (directions in
/// the null space of the centered features) are placed after all others.
pub fn lpp_fit(features: &Tensor, params: &LppParams) -> Result<LppModel> {
    let (n, d) = (features.rows(), features.cols());
    let k = params.k;
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!("lpp needs n > k >= 1, got n = {n}, k = {k}")));
    }
    if params.embed_dim == 0 || params.embed_dim > d {
        return Err(Error::Parameter(format!("embed_dim {} must be in 1..={d}", params.embed_dim)));
    }
    if !features.all_finite() {
        return Err(Error::Domain("lpp features contain non-finite values".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = Tensor::matrix(
        n,
        d,
        (0..n).flat_map(|i| features.row(i).iter().zip(&mean).map(|(x, m)| x - m)).collect(),
    );
    let edges = knn_graph(&centered, k, params.weights);
    let (a, mut b) = laplacian_forms(&centered, &edges);

    let b_eigs = SymmetricEigen::new(b.clone()).eigenvalues;
    let (lo, hi) = b_eigs.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let mut reg_eps = 0.0;
    if hi == 0.0 || lo <= 1e-12 * hi {
        reg_eps = 1e-8 * b.trace() / d as f64;
        if reg_eps <= 0.0 {
            reg_eps = 1e-8;
        }
        for i in 0..d {
            b[(i, i)] += reg_eps;
        }
    }
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("XᵀDX is not positive definite after regularization".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Domain("singular Cholesky factor".into()))?;
    let mut c = &l_inv * &a * l_inv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let vecs = l_inv.transpose() * &eig.eigenvectors;

    let x = to_dmatrix(&centered);
    let rms_x = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let mut order: Vec<(bool, f64, usize, f64)> = (0..d)
        .map(|j| {
            let col = vecs.column(j);
            let proj = &x * col;
            let std = (proj.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            let degenerate = std <= 1e-9 * col.norm() * rms_x;
            (degenerate, eig.eigenvalues[j], j, std)
        })
        .collect();
    order.sort_by(|p, q| p.0.cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.cmp(&q.2)));

    let e = params.embed_dim;
    let mut projection = Tensor::zeros(&[d, e]);
    let mut scales = Vec::with_capacity(e);
    let mut eigenvalues = Vec::with_capacity(e);
    let mut max_residual: f64 = 0.0;
    for (out, &(degenerate, lambda, j, std)) in order.iter().take(e).enumerate() {
        let mut col: DVector<f64> = vecs.column(j).into_owned();
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col = -col;
        }
        let r = (&a * &col - lambda * (&b * &col)).norm() / col.norm();
        max_residual = max_residual.max(r);
        for p in 0..d {
            projection.set(p, out, col[p]);
        }
        scales.push(if degenerate || std == 0.0 { 1.0 } else { std });
        eigenvalues.push(lambda);
    }
    Ok(LppModel { n_train: n, k, weights: params.weights, projection, mean, scales, eigenvalues, reg_eps, max_residual })
}

impl LppModel {
    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.scales.len()
    }

    /// `aᵀ(f − mean)` per row, before standardization.
    pub fn raw_project_rows(&self, rows: &Tensor) -> Result<Tensor> {
        rows.expect_matrix(None, self.feature_dim(), "lpp_project")?;
        let centered = Tensor::matrix(
            rows.rows(),
            rows.cols(),
            (0..rows.rows()).flat_map(|i| rows.row(i).iter().zip(&self.mean).map(|(x, m)| x - m)).collect(),
        );
        matmul(&centered, &self.projection)
    }

    /// Standardized embedding of each row.
    pub fn project_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let mut p = self.raw_project_rows(rows)?;
        let e = self.embed_dim();
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v /= self.scales[i % e];
        }
        Ok(p)
    }

    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_rows(&Tensor::matrix(1, f.len(), f.to_vec()))?.into_data())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(EMBEDDING_MAGIC, EMBEDDING_VERSION);
        w.u64(self.n_train as u64);
        w.u64(self.feature_dim() as u64);
        w.u64(self.embed_dim() as u64);
        w.u64(self.k as u64);
        match self.weights {
            GraphWeights::Binary => {
                w.u32(0);
                w.f64(0.0);
            }
            GraphWeights::Heat { t } => {
                w.u32(if t.is_some() { 2 } else { 1 });
                w.f64(t.unwrap_or(0.0));
            }
        }
        w.f64s(self.projection.data());
        w.f64s(&self.mean);
        w.f64s(&self.scales);
        w.f64s(&self.eigenvalues);
        w.f64(self.reg_eps);
        w.f64(self.max_residual);
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
        let n_train = r.len("training rows")?;
        let d = r.len("feature dim")?;
        let e = r.len("embed dim")?;
        let k = r.len("neighbor count")?;
        let at = r.offset();
        let kind = r.u32("weight kind")?;
        let t = r.f64("heat width")?;
        let weights = match kind {
            0 => GraphWeights::Binary,
            1 => GraphWeights::Heat { t: None },
            2 => GraphWeights::Heat { t: Some(t) },
            other => return Err(Error::Format { offset: at, message: format!("unknown weight kind {other}") }),
        };
        let projection = Tensor::matrix(d, e, r.f64s(product(&r, d, e)?, "projection")?);
        let mean = r.f64s(d, "mean")?;
        let scales = r.f64s(e, "scales")?;
        let eigenvalues = r.f64s(e, "eigenvalues")?;
        let reg_eps = r.f64("regularization")?;
        let max_residual = r.f64("residual")?;
        r.finish()?;
        Ok(Self { n_train, k, weights, projection, mean, scales, eigenvalues, reg_eps, max_residual })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn lpp_project(model: &LppModel, f: &[f64]) -> Result<Vec<f64>> {
    model.project(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Two isotropic 2-D clusters of `per` points at (-c, 0) and (c, 0).
    fn two_clusters(per: usize, c: f64, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        let mut data = Vec::new();
        for cl in 0..2 {
            let cx = if cl == 0 { -c } else { c };
            for _ in 0..per {
                let (a, b): (f64, f64) = (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
                data.extend([cx + a, b]);
            }
        }
        Tensor::matrix(2 * per, 2, data)
    }

    fn dist_ratio(p: &Tensor, per: usize) -> f64 {
        let n = p.rows();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in i + 1..n {
                let dd: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if (i < per) == (j < per) {
                    within += dd;
                    nw += 1;
                } else {
                    between += dd;
                    nb += 1;
                }
            }
        }
        (within / nw as f64) / (between / nb as f64)
    }

    fn params(k: usize, e: usize) -> LppParams {
        LppParams { k, embed_dim: e, weights: GraphWeights::Binary }
    }

    /// Independent loop construction of both quadratic forms.
    fn oracle_forms(x: &Tensor, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (n, d) = (x.rows(), x.cols());
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
        let xc: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| x.get(i, j) - mean[j]).collect()).collect();
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let dist = |j: usize| -> f64 { (0..d).map(|p| (xc[i][p] - xc[j][p]).powi(2)).sum() };
            idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            for &j in &idx[..k] {
                w[i][j] = 1.0;
                w[j][i] = 1.0;
            }
        }
        let deg: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![vec![0.0; d]; d];
        for i in 0..n {
            for j in 0..n {
                let l = if i == j { deg[i] } else { 0.0 } - w[i][j];
                let dd = if i == j { deg[i] } else { 0.0 };
                for p in 0..d {
                    for q in 0..d {
                        a[p][q] += xc[i][p] * l * xc[j][q];
                        b[p][q] += xc[i][p] * dd * xc[j][q];
                    }
                }
            }
        }
        (a, b)
    }

    #[test]
    fn two_clusters_separate_in_one_dimension() {
        let x = two_clusters(60, 5.0, 1);
        let m = lpp_fit(&x, &params(5, 1)).unwrap();
        let p = m.project_rows(&x).unwrap();
        assert!(dist_ratio(&p, 60) < 1.0);
        assert!(m.max_residual <= 1e-8);
    }

    #[test]
    fn residual_against_independent_forms() {
        let mut r = rng::stream(2, 0);
        let x = Tensor::matrix(80, 5, (0..400).map(|_| r.random::<f64>()).collect());
        let m = lpp_fit(&x, &params(6, 3)).unwrap();
        assert_eq!(m.reg_eps, 0.0);
        let (a, b) = oracle_forms(&x, 6);
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|p| m.projection.get(p, c)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let lam = m.eigenvalues[c];
            let res: f64 = (0..5)
                .map(|p| {
                    let s: f64 = (0..5).map(|q| (a[p][q] - lam * b[p][q]) * col[q]).sum();
                    s * s
                })
                .sum::<f64>()
                .sqrt();
            assert!(res <= 1e-8 * norm, "pair {c}: {res}");
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn duplicates_share_embeddings() {
        let mut x = two_clusters(20, 3.0, 3);
        let dup = x.row(4).to_vec();
        x.row_mut(9).copy_from_slice(&dup);
        let m = lpp_fit(&x, &params(4, 2)).unwrap();
        let p = m.project_rows(&x).unwrap();
        assert_eq!(p.row(4), p.row(9));
    }

    #[test]
    fn projection_consistency_and_centering() {
        let x = two_clusters(30, 2.0, 4);
        let m = lpp_fit(&x, &params(5, 2)).unwrap();
        let all = m.project_rows(&x).unwrap();
        for i in 0..x.rows() {
            assert_eq!(m.project(x.row(i)).unwrap(), all.row(i));
        }
        let at_mean = m.raw_project_rows(&Tensor::matrix(1, 2, m.mean.clone())).unwrap();
        assert!(at_mean.data().iter().all(|&v| v == 0.0));
        for j in 0..2 {
            let var = (0..x.rows()).map(|i| all.get(i, j).powi(2)).sum::<f64>() / x.rows() as f64;
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert!(matches!(m.project(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rotation_leaves_ratio_unchanged() {
        let x = two_clusters(50, 4.0, 5);
        let th: f64 = 0.7;
        let (c, s) = (th.cos(), th.sin());
        let rot = Tensor::matrix(
            x.rows(),
            2,
            (0..x.rows()).flat_map(|i| {
                let (a, b) = (x.get(i, 0), x.get(i, 1));
                [c * a - s * b, s * a + c * b]
            })
            .collect(),
        );
        let r0 = dist_ratio(&lpp_fit(&x, &params(6, 1)).unwrap().project_rows(&x).unwrap(), 50);
        let r1 = dist_ratio(&lpp_fit(&rot, &params(6, 1)).unwrap().project_rows(&rot).unwrap(), 50);
        assert!((r0 - r1).abs() < 1e-6, "{r0} vs {r1}");
    }

    /// Clusters at (±3, 0) stretched along y so the pooled covariance is
    /// isotropic; standardization then acts as a similarity.
    fn balanced_clusters(per: usize, seed: u64) -> Tensor {
        let x = two_clusters(per, 3.0, seed);
        Tensor::matrix(x.rows(), 2, (0..x.rows()).flat_map(|i| [x.get(i, 0), 10f64.sqrt() * x.get(i, 1)]).collect())
    }

    #[test]
    fn held_out_nearest_neighbors_mostly_preserved() {
        let train = balanced_clusters(100, 6);
        let test = balanced_clusters(25, 7);
        let m = lpp_fit(&train, &params(8, 2)).unwrap();
        let pt = m.project_rows(&train).unwrap();
        let pq = m.project_rows(&test).unwrap();
        let nn = |q: &[f64], set: &Tensor| -> usize {
            (0..set.rows())
                .min_by(|&a, &b| {
                    let da: f64 = q.iter().zip(set.row(a)).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = q.iter().zip(set.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        let same = (0..test.rows()).filter(|&i| nn(test.row(i), &train) == nn(pq.row(i), &pt)).count();
        assert!(same * 5 >= test.rows() * 4, "{same} of {}", test.rows());
    }

    #[test]
    fn rank_deficient_features_are_regularized() {
        let mut r = rng::stream(8, 0);
        let x = Tensor::matrix(
            40,
            3,
            (0..40)
                .flat_map(|_| {
                    let a: f64 = r.random();
                    [a, 2.0 * a, 0.5]
                })
                .collect(),
        );
        let m = lpp_fit(&x, &params(4, 3)).unwrap();
        assert!(m.reg_eps > 0.0);
        assert!(m.projection.all_finite() && m.scales.iter().all(|s| *s > 0.0));
        let p = m.project_rows(&x).unwrap();
        let var0 = (0..40).map(|i| p.get(i, 0).powi(2)).sum::<f64>() / 40.0;
        assert!((var0 - 1.0).abs() < 1e-8, "informative direction comes first");
    }

    #[test]
    fn parameter_errors() {
        let x = two_clusters(3, 1.0, 9);
        assert!(matches!(lpp_fit(&x, &params(6, 1)), Err(Error::Parameter(_))));
        assert!(matches!(lpp_fit(&x, &params(0, 1)), Err(Error::Parameter(_))));
        assert!(matches!(lpp_fit(&x, &params(2, 3)), Err(Error::Parameter(_))));
    }

    #[test]
    fn heat_weights_fit() {
        let x = two_clusters(40, 5.0, 10);
        let p = LppParams { k: 5, embed_dim: 1, weights: GraphWeights::Heat { t: None } };
        let m = lpp_fit(&x, &p).unwrap();
        assert!(dist_ratio(&m.project_rows(&x).unwrap(), 40) < 1.0);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let x = two_clusters(20, 3.0, 11);
        for w in [GraphWeights::Binary, GraphWeights::Heat { t: Some(2.5) }, GraphWeights::Heat { t: None }] {
            let m = lpp_fit(&x, &LppParams { k: 4, embed_dim: 2, weights: w }).unwrap();
            let bytes = m.to_bytes();
            assert_eq!(LppModel::from_bytes(&bytes).unwrap(), m);
            assert!(matches!(LppModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        }
    }
}
