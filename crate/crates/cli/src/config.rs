use std::path::Path;

use anyhow::{Context, Result};
use cdvae_core::baselines::{CvaeConfig, RegressionConfig};
use cdvae_core::cdvae::{CdvaeConfig, TrainSchedule};
use cdvae_core::data::SyntheticSpec;
use cdvae_core::embedding::LppParams;
use cdvae_core::eval::{ErrorNorm, SAMPLE_COUNTS};
use cdvae_core::{Error, FitConfig, ScatteredDataset};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TEST_ROWS: usize = 100;

/// Network sizes of the CVAE baseline; input widths come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeSection {
    pub code_dim: usize,
    pub tower_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for CvaeSection {
    fn default() -> Self {
        let c = CvaeConfig::new(1, 1);
        Self {
            code_dim: c.code_dim,
            tower_hidden: c.tower_hidden,
            encoder_hidden: c.encoder_hidden,
            decoder_hidden: c.decoder_hidden,
            leaky_slope: c.leaky_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSection {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for RegressionSection {
    fn default() -> Self {
        let c = RegressionConfig::new(1, 1);
        Self { hidden: c.hidden, leaky_slope: c.leaky_slope }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub counts: Vec<usize>,
    pub norm: ErrorNorm,
    /// The last `test_rows` dataset rows are held out for sampling.
    pub test_rows: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { counts: SAMPLE_COUNTS.to_vec(), norm: ErrorNorm::L1, test_rows: DEFAULT_TEST_ROWS }
    }
}

/// Everything a training or sampling run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `schedule.seed` and `baseline_fit.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Generator that produced the data, recorded for provenance.
    #[serde(default)]
    pub task: Option<SyntheticSpec>,
    pub model: CdvaeConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub lpp: LppParams,
    #[serde(default)]
    pub cvae: CvaeSection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub baseline_fit: FitConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        if let Some(s) = c.seed {
            c.schedule.seed = s;
            c.baseline_fit.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.baseline_fit.validate()?;
        if let Some(t) = &self.task {
            t.validate()?;
        }
        if self.lpp.k == 0 || self.lpp.embed_dim == 0 {
            return Err(Error::Config("lpp k and embed_dim must be positive".into()).into());
        }
        if self.eval.counts.is_empty() || self.eval.counts.contains(&0) {
            return Err(Error::Config("eval counts must be non-empty and positive".into()).into());
        }
        Ok(())
    }

    /// Model input widths must match the dataset.
    pub fn check_data(&self, ds: &ScatteredDataset) -> Result<()> {
        let (c, g) = (self.model.cond.input_dim, self.model.gen.input_dim);
        if c != ds.x_c.cols() || g != ds.x_g.cols() {
            return Err(Error::Config(format!(
                "model expects x_c width {c} and x_g width {g}, dataset has {} and {}",
                ds.x_c.cols(),
                ds.x_g.cols()
            ))
            .into());
        }
        if self.eval.test_rows >= ds.len() {
            return Err(Error::Config(format!(
                "test_rows {} leaves no training rows out of {}",
                self.eval.test_rows,
                ds.len()
            ))
            .into());
        }
        Ok(())
    }

    pub fn cvae_config(&self, ds: &ScatteredDataset) -> CvaeConfig {
        let s = &self.cvae;
        CvaeConfig {
            cond_dim: ds.x_c.cols(),
            field_dim: ds.x_g.cols(),
            code_dim: s.code_dim,
            tower_hidden: s.tower_hidden.clone(),
            encoder_hidden: s.encoder_hidden.clone(),
            decoder_hidden: s.decoder_hidden.clone(),
            leaky_slope: s.leaky_slope,
        }
    }

    pub fn regression_config(&self, ds: &ScatteredDataset) -> RegressionConfig {
        RegressionConfig {
            cond_dim: ds.x_c.cols(),
            field_dim: ds.x_g.cols(),
            hidden: self.regression.hidden.clone(),
            leaky_slope: self.regression.leaky_slope,
        }
    }
}
