//! Diversity-aware metrics: error of the best sample and grid variance,
//! plus the tabular report.
//!
//! Reference magnitudes from full-scale training (all ×10⁻², Sample# 100),
//! kept for orientation only:
//!
//! | task | method | best error | variance |
//! |---|---|---|---|
//! | relighting | CDVAE12 | 1.12 | 1.74 |
//! | resaturation | CVAE | 4.25 | 1.20 |
//! | resaturation | CDVAE (12 components) | 3.82 | 3.55 |

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_COUNTS: [usize; 5] = [3, 10, 30, 60, 100];

/// Samples drawn for one input, with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    samples: Tensor,
    ground_truth: Vec<f64>,
    postprocessed: bool,
}

impl SamplePool {
    pub fn new(samples: Tensor, ground_truth: Vec<f64>) -> Result<Self> {
        Self::build(samples, ground_truth, false)
    }

    /// A pool of composited outputs. Metrics refuse these.
    pub fn postprocessed(samples: Tensor, ground_truth: Vec<f64>) -> Result<Self> {
        Self::build(samples, ground_truth, true)
    }

    fn build(samples: Tensor, ground_truth: Vec<f64>, postprocessed: bool) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Parameter("sample pool is empty".into()));
        }
        samples.expect_matrix(None, ground_truth.len(), "sample pool")?;
        Ok(Self { samples, ground_truth, postprocessed })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn ground_truth(&self) -> &[f64] {
        &self.ground_truth
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_postprocessed(&self) -> bool {
        self.postprocessed
    }

    fn check_raw(&self) -> Result<()> {
        if self.postprocessed {
            return Err(Error::Parameter("metrics are computed on raw decoder outputs, not composited fields".into()));
        }
        Ok(())
    }
}

/// Per-pixel error used by [`error_of_best`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNorm {
    /// Mean absolute difference.
    #[default]
    L1,
    /// Mean squared difference.
    L2,
}

fn sample_error(sample: &[f64], gt: &[f64], norm: ErrorNorm) -> f64 {
    let s: f64 = match norm {
        ErrorNorm::L1 => sample.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum(),
        ErrorNorm::L2 => sample.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum(),
    };
    s / gt.len() as f64
}

/// For each `m` in `counts`, the smallest per-pixel error among the first
/// `m` samples.
pub fn error_of_best(pool: &SamplePool, counts: &[usize], norm: ErrorNorm) -> Result<Vec<f64>> {
    pool.check_raw()?;
    if let Some(&m) = counts.iter().find(|&&m| m == 0 || m > pool.len()) {
        return Err(Error::Parameter(format!("count {m} outside 1..={} samples", pool.len())));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut prefix_min = Vec::with_capacity(max);
    let mut best = f64::INFINITY;
    for i in 0..max {
        best = best.min(sample_error(pool.samples.row(i), &pool.ground_truth, norm));
        prefix_min.push(best);
    }
    Ok(counts.iter().map(|&m| prefix_min[m - 1]).collect())
}

/// Row and column indices of the 4x4 measurement grid; {4, 12, 20, 28} for
/// a 32-pixel side.
pub fn grid_indices(side: usize) -> [usize; 4] {
    std::array::from_fn(|k| side / 8 + k * side / 4)
}

/// Unbiased variance across each pool's samples at the 16 grid pixels,
/// averaged over grid points and pools.
pub fn grid_variance(pools: &[SamplePool], side: usize) -> Result<f64> {
    if pools.is_empty() {
        return Err(Error::Parameter("grid_variance needs at least one pool".into()));
    }
    let idx = grid_indices(side);
    let mut total = 0.0;
    for pool in pools {
        pool.check_raw()?;
        if pool.ground_truth.len() != side * side {
            return Err(Error::Dimension(format!("field of {} values is not {side}x{side}", pool.ground_truth.len())));
        }
        let m = pool.len();
        if m < 2 {
            return Err(Error::Parameter(format!("grid_variance needs >= 2 samples, pool has {m}")));
        }
        let mut acc = 0.0;
        for &r in &idx {
            for &c in &idx {
                let p = r * side + c;
                // shifted by the first sample so identical samples give exactly 0
                let x0 = pool.samples.get(0, p);
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in 1..m {
                    let d = pool.samples.get(i, p) - x0;
                    s1 += d;
                    s2 += d * d;
                }
                acc += (s2 - s1 * s1 / m as f64) / (m - 1) as f64;
            }
        }
        total += acc / 16.0;
    }
    Ok(total / pools.len() as f64)
}

/// Aggregated metrics of one method over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    /// `(sample count, mean best error over inputs)`.
    pub best_error: Vec<(usize, f64)>,
    pub variance: f64,
}

/// Mean of [`error_of_best`] over pools and [`grid_variance`].
pub fn evaluate_method(
    name: &str,
    pools: &[SamplePool],
    counts: &[usize],
    side: usize,
    norm: ErrorNorm,
) -> Result<MethodResult> {
    if pools.is_empty() {
        return Err(Error::Parameter(format!("method {name} has no pools")));
    }
    let mut sums = vec![0.0; counts.len()];
    for pool in pools {
        for (s, e) in sums.iter_mut().zip(error_of_best(pool, counts, norm)?) {
            *s += e;
        }
    }
    let best_error = counts.iter().zip(sums).map(|(&c, s)| (c, s / pools.len() as f64)).collect();
    Ok(MethodResult { name: name.to_string(), best_error, variance: grid_variance(pools, side)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: Vec<usize>,
    /// In the order supplied.
    pub methods: Vec<MethodResult>,
}

pub fn make_report(methods: Vec<MethodResult>, counts: &[usize]) -> Result<EvalReport> {
    for m in &methods {
        for &c in counts {
            if !m.best_error.iter().any(|&(k, v)| k == c && v.is_finite()) {
                return Err(Error::Report(format!("method {} has no best-error value for Sample# {c}", m.name)));
            }
        }
        if !m.variance.is_finite() {
            return Err(Error::Report(format!("method {} has no variance", m.name)));
        }
    }
    Ok(EvalReport { counts: counts.to_vec(), methods })
}

impl EvalReport {
    fn cell(&self, m: &MethodResult, c: usize) -> f64 {
        m.best_error.iter().find(|e| e.0 == c).map(|e| e.1).expect("validated in make_report")
    }

    /// Fixed-width table with values scaled by 100.
    pub fn render_table(&self) -> String {
        let name_w = self.methods.iter().map(|m| m.name.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:name_w$} | Best Error to Ground Truth", "");
        let mut head = format!("{:name_w$} |", "Method");
        for c in &self.counts {
            let _ = write!(head, " {:>10}", format!("Sample# {c}"));
        }
        let _ = write!(head, " | {:>8}", "Variance");
        let _ = writeln!(out, "{head}");
        let _ = writeln!(out, "{}", "-".repeat(head.chars().count()));
        for m in &self.methods {
            let _ = write!(out, "{:name_w$} |", m.name);
            for &c in &self.counts {
                let _ = write!(out, " {:>10.2}", 100.0 * self.cell(m, c));
            }
            let _ = writeln!(out, " | {:>8.2}", 100.0 * m.variance);
        }
        let _ = writeln!(out, "(all results need ×10⁻²)");
        out
    }

    /// `method,metric,count,value` rows with unscaled values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,count,value\n");
        for m in &self.methods {
            for &c in &self.counts {
                let _ = writeln!(out, "{},best_error,{c},{:e}", m.name, self.cell(m, c));
            }
            let _ = writeln!(out, "{},variance,,{:e}", m.name, m.variance);
        }
        out
    }
}

pub const POOLS_MAGIC: &[u8; 4] = b"CDVP";
pub const POOLS_VERSION: u32 = 1;

/// Sample pools of one method over a test set, as written by sampling.
///
/// Layout (little-endian): magic, `u32` version, metadata JSON, method name,
/// `u64` side, `u64` pool count, then per pool `u8` postprocessed flag,
/// `u64` rows, `u64` cols, samples, ground truth. Strings are `u64` length
/// + UTF-8.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolSet {
    pub meta: String,
    pub method: String,
    pub side: usize,
    pub pools: Vec<SamplePool>,
}

impl PoolSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(POOLS_MAGIC, POOLS_VERSION);
        w.str(&self.meta);
        w.str(&self.method);
        w.u64(self.side as u64);
        w.u64(self.pools.len() as u64);
        for p in &self.pools {
            w.u64(u64::from(p.postprocessed));
            w.u64(p.samples.rows() as u64);
            w.u64(p.samples.cols() as u64);
            w.f64s(p.samples.data());
            w.f64s(&p.ground_truth);
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, POOLS_MAGIC, POOLS_VERSION)?;
        let meta = r.str("metadata")?;
        let method = r.str("method")?;
        let side = r.len("side")?;
        let n = r.len("pool count")?;
        let mut pools = Vec::new();
        for _ in 0..n {
            let at = r.offset();
            let flag = r.u64("postprocessed flag")?;
            if flag > 1 {
                return Err(Error::Format { offset: at, message: format!("postprocessed flag {flag}") });
            }
            let rows = r.len("pool rows")?;
            let cols = r.len("pool cols")?;
            let count = match rows.checked_mul(cols) {
                Some(c) => c,
                None => return r.fail("pool size overflows".to_string()),
            };
            let samples = Tensor::matrix(rows, cols, r.f64s(count, "samples")?);
            let gt = r.f64s(cols, "ground truth")?;
            let pool = SamplePool::build(samples, gt, flag == 1).or_else(|e| r.fail(e.to_string()))?;
            pools.push(pool);
        }
        r.finish()?;
        Ok(Self { meta, method, side, pools })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_pool(r: &mut impl Rng, m: usize, d: usize) -> SamplePool {
        let s = Tensor::matrix(m, d, (0..m * d).map(|_| r.random::<f64>()).collect());
        SamplePool::new(s, (0..d).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ground_truth_in_pool_gives_zero() {
        let mut r = rng::stream(1, 0);
        let mut pool = random_pool(&mut r, 5, 16);
        let gt = pool.ground_truth.clone();
        pool.samples.row_mut(2).copy_from_slice(&gt);
        assert_eq!(error_of_best(&pool, &[1, 2, 3, 4, 5], ErrorNorm::L1).unwrap()[2..], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_offset() {
        let gt = vec![0.2; 9];
        let pool = SamplePool::new(Tensor::full(&[4, 9], 0.25), gt).unwrap();
        for e in error_of_best(&pool, &[1, 4], ErrorNorm::L1).unwrap() {
            assert!((e - 0.05).abs() < 1e-15);
        }
        for e in error_of_best(&pool, &[1, 4], ErrorNorm::L2).unwrap() {
            assert!((e - 0.0025).abs() < 1e-15);
        }
    }

    #[test]
    fn count_errors() {
        let mut r = rng::stream(2, 0);
        let pool = random_pool(&mut r, 3, 4);
        assert!(matches!(error_of_best(&pool, &[4], ErrorNorm::L1), Err(Error::Parameter(_))));
        assert!(matches!(error_of_best(&pool, &[0], ErrorNorm::L1), Err(Error::Parameter(_))));
    }

    #[test]
    fn grid_indices_for_32() {
        assert_eq!(grid_indices(32), [4, 12, 20, 28]);
    }

    #[test]
    fn grid_variance_cases() {
        let same = SamplePool::new(Tensor::full(&[3, 1024], 0.4), vec![0.0; 1024]).unwrap();
        assert_eq!(grid_variance(&[same], 32).unwrap(), 0.0);
        let mut two = Tensor::zeros(&[2, 1024]);
        two.row_mut(1).fill(1.0);
        let pool = SamplePool::new(two, vec![0.0; 1024]).unwrap();
        assert!((grid_variance(&[pool], 32).unwrap() - 0.5).abs() < 1e-15);
        let one = SamplePool::new(Tensor::zeros(&[1, 1024]), vec![0.0; 1024]).unwrap();
        assert!(matches!(grid_variance(&[one], 32), Err(Error::Parameter(_))));
    }

    #[test]
    fn composited_pools_are_refused() {
        let p = SamplePool::postprocessed(Tensor::zeros(&[2, 1024]), vec![0.0; 1024]).unwrap();
        assert!(p.is_postprocessed());
        assert!(error_of_best(&p, &[1], ErrorNorm::L1).is_err());
        assert!(grid_variance(&[p], 32).is_err());
    }

    #[test]
    fn report_rendering_and_csv() {
        let m = MethodResult {
            name: "CDVAE".into(),
            best_error: SAMPLE_COUNTS.iter().map(|&c| (c, 0.01 / c as f64)).collect(),
            variance: 0.0174,
        };
        let n = MethodResult { name: "NN".into(), best_error: m.best_error.clone(), variance: 0.01 };
        let rep = make_report(vec![n, m], &SAMPLE_COUNTS).unwrap();
        let t = rep.render_table();
        assert!(t.contains("×10⁻²"));
        assert!(t.contains("1.74"));
        assert!(t.find("NN").unwrap() < t.find("CDVAE").unwrap());
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * 6);
        assert!(csv.contains("CDVAE,variance,,"));
    }

    #[test]
    fn missing_cell_is_named() {
        let m = MethodResult { name: "CVAE".into(), best_error: vec![(3, 0.1)], variance: 0.0 };
        match make_report(vec![m], &[3, 10]) {
            Err(Error::Report(msg)) => assert!(msg.contains("CVAE") && msg.contains("10")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_file_round_trip_and_truncation() {
        let mut r = rng::stream(3, 0);
        let set = PoolSet {
            meta: r#"{"seed":3}"#.into(),
            method: "cdvae".into(),
            side: 2,
            pools: vec![random_pool(&mut r, 3, 4), SamplePool::postprocessed(Tensor::zeros(&[2, 4]), vec![0.5; 4]).unwrap()],
        };
        let bytes = set.to_bytes();
        let back = PoolSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes(), bytes);
        for cut in 0..bytes.len() {
            assert!(matches!(PoolSet::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cdvp");
        set.save(&path).unwrap();
        assert_eq!(PoolSet::load(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn best_error_monotone(seed in 0u64..1000, m in 1usize..20) {
            let mut r = rng::stream(seed, 0);
            let pool = random_pool(&mut r, m, 8);
            let counts: Vec<usize> = (1..=m).collect();
            let e = error_of_best(&pool, &counts, ErrorNorm::L1).unwrap();
            prop_assert!(e.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn grid_variance_shift_invariant(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let mut r = rng::stream(seed, 0);
            let pool = random_pool(&mut r, 4, 1024);
            let c: Vec<f64> = (0..1024).map(|_| r.random::<f64>() * shift).collect();
            let mut shifted = pool.samples.clone();
            for i in 0..4 {
                for (v, s) in shifted.row_mut(i).iter_mut().zip(&c) {
                    *v += s;
                }
            }
            let a = grid_variance(&[pool.clone()], 32).unwrap();
            let b = grid_variance(&[SamplePool::new(shifted, pool.ground_truth.clone()).unwrap()], 32).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
