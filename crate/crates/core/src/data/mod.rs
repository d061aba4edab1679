//! Scattered paired datasets: synthetic generators, image ingestion and the
//! `CDVD` file format.
//!
//! # `CDVD` layout (all integers and floats little-endian)
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CDVD"` |
//! | version | `u32` (= 1) |
//! | rows `n` | `u64` |
//! | conditioning width | `u64` |
//! | generated width | `u64` |
//! | feature width | `u64` |
//! | `x_c` | `n * width` `f64`, row-major |
//! | `x_g` | `n * width` `f64`, row-major |
//! | features | `n * width` `f64`, row-major |
//! | metadata | `u64` byte length + UTF-8 JSON |

mod image;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{product, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use image::{
    area_resize, downsample_field, hsv_to_rgb, ingest_relight_dir, ingest_resaturation_dir, read_pnm, rgb_to_hsv,
    write_pgm, Image,
};
pub use synthetic::{
    gen_lightfield, gen_toy_1d, generate, lightfield_scene, shade_scene, toy_branch, LightfieldScene, SyntheticSpec,
    SyntheticTask,
};

pub const DATASET_MAGIC: &[u8; 4] = b"CDVD";
pub const DATASET_VERSION: u32 = 1;

/// Provenance stored alongside the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: String,
    /// Fields are `side x side`, flattened row-major.
    pub side: usize,
    #[serde(default)]
    pub generator: Option<SyntheticSpec>,
    #[serde(default)]
    pub source: Option<String>,
    /// Whether the feature rows carry label blocks.
    #[serde(default)]
    pub has_labels: bool,
}

/// Paired conditioning / generated fields. Each conditioning input appears
/// with exactly one output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteredDataset {
    pub x_c: Tensor,
    pub x_g: Tensor,
    pub features: Tensor,
    pub meta: DatasetMeta,
}

impl ScatteredDataset {
    pub fn new(x_c: Tensor, x_g: Tensor, features: Tensor, meta: DatasetMeta) -> Result<Self> {
        let n = x_c.rows();
        if x_g.rows() != n || features.rows() != n {
            return Err(Error::Dimension(format!(
                "row counts differ: x_c {n}, x_g {}, features {}",
                x_g.rows(),
                features.rows()
            )));
        }
        if x_c.cols() != meta.side * meta.side || x_g.cols() != meta.side * meta.side {
            return Err(Error::Dimension(format!(
                "fields of width {} / {} do not match side {}",
                x_c.cols(),
                x_g.cols(),
                meta.side
            )));
        }
        Ok(Self { x_c, x_g, features, meta })
    }

    pub fn len(&self) -> usize {
        self.x_c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn field_dim(&self) -> usize {
        self.x_c.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x_c: self.x_c.select_rows(idx),
            x_g: self.x_g.select_rows(idx),
            features: self.features.select_rows(idx),
            meta: self.meta.clone(),
        }
    }

    /// Splits off the last `n_test` rows.
    pub fn split(&self, n_test: usize) -> (Self, Self) {
        let n = self.len();
        let cut = n.saturating_sub(n_test);
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..n).collect();
        (self.subset(&train), self.subset(&test))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u64(self.len() as u64);
        w.u64(self.x_c.cols() as u64);
        w.u64(self.x_g.cols() as u64);
        w.u64(self.features.cols() as u64);
        w.f64s(self.x_c.data());
        w.f64s(self.x_g.data());
        w.f64s(self.features.data());
        w.str(&serde_json::to_string(&self.meta).expect("metadata serializes"));
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, DATASET_MAGIC, DATASET_VERSION)?;
        let n = r.len("row count")?;
        let dc = r.len("conditioning width")?;
        let dg = r.len("generated width")?;
        let df = r.len("feature width")?;
        let x_c = r.f64s(product(&r, n, dc)?, "x_c block")?;
        let x_g = r.f64s(product(&r, n, dg)?, "x_g block")?;
        let features = r.f64s(product(&r, n, df)?, "feature block")?;
        let at = r.offset();
        let meta_json = r.str("metadata")?;
        let meta: DatasetMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::Format { offset: at, message: format!("metadata: {e}") })?;
        r.finish()?;
        Self::new(Tensor::matrix(n, dc, x_c), Tensor::matrix(n, dg, x_g), Tensor::matrix(n, df, features), meta)
            .map_err(|e| Error::Format { offset: at, message: e.to_string() })
    }
}

pub fn save_dataset(ds: &ScatteredDataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ScatteredDataset> {
    ScatteredDataset::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScatteredDataset {
        gen_toy_1d(&SyntheticSpec { task: SyntheticTask::Toy1d, n: 5, modes: 2, noise: 0.05, seed: 3, side: 4 }).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = ScatteredDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = small().to_bytes();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match ScatteredDataset::from_bytes(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_version_and_magic_rejected() {
        let mut bytes = small().to_bytes();
        bytes[4] = 9;
        assert!(matches!(ScatteredDataset::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = small().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ScatteredDataset::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = small().to_bytes();
        bytes.push(0);
        assert!(matches!(ScatteredDataset::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cdvd");
        let ds = small();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}
