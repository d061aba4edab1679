use serde::{Deserialize, Serialize};

use super::{total_loss_grad, CdvaeConfig, CdvaeNoise, CdvaeParams, LossBreakdown, LossWeights};
use crate::data::ScatteredDataset;
use crate::embedding::LppModel;
use crate::error::{Error, Result};
use crate::fit::epoch_batches;
use crate::numerics::{rng, Adam, AdamConfig, ParamSet, Tensor};

/// Three-phase schedule: fixed initial weights, a linear per-epoch ramp,
/// then fixed final weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub initial: LossWeights,
    #[serde(rename = "final")]
    pub final_weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    /// L2 coefficient on the mixture network parameters.
    pub mdn_weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            phase1_epochs: 100,
            phase2_epochs: 200,
            phase3_epochs: 200,
            initial: LossWeights::INITIAL,
            final_weights: LossWeights::FINAL,
            batch_size: 64,
            seed: 0,
            mdn_weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup = 1,
    Ramp = 2,
    Final = 3,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mdn_weight_decay >= 0.0) {
            return Err(Error::Config("mdn_weight_decay must be >= 0".into()));
        }
        self.initial.validate()?;
        self.final_weights.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs + self.phase3_epochs
    }

    /// Phase and weights used during `epoch` (0-based). Ramp epoch `j` of
    /// `P` uses `t = (j + 1) / P`, reaching the final weights on its last
    /// epoch.
    pub fn weights_at(&self, epoch: usize) -> (Phase, LossWeights) {
        if epoch < self.phase1_epochs {
            (Phase::Warmup, self.initial)
        } else if epoch < self.phase1_epochs + self.phase2_epochs {
            let j = epoch - self.phase1_epochs;
            let t = (j + 1) as f64 / self.phase2_epochs as f64;
            (Phase::Ramp, self.initial.lerp(&self.final_weights, t))
        } else {
            (Phase::Final, self.final_weights)
        }
    }
}

/// Per-epoch averages of every loss component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub weights: LossWeights,
    pub loss: LossBreakdown,
}

pub const HISTORY_COLUMNS: [&str; 13] = [
    "epoch", "phase", "recon_c", "kl_c", "recon_g", "kl_g", "mdn", "embed", "total", "w_recon", "w_kl", "w_mdn",
    "w_embed",
];

pub fn history_to_tensor(history: &[EpochRecord]) -> Tensor {
    let data = history
        .iter()
        .flat_map(|r| {
            let l = &r.loss;
            let w = &r.weights;
            [
                r.epoch as f64,
                r.phase as u8 as f64,
                l.recon_c,
                l.kl_c,
                l.recon_g,
                l.kl_g,
                l.mdn,
                l.embed,
                l.total,
                w.recon,
                w.kl,
                w.mdn,
                w.embed,
            ]
        })
        .collect();
    Tensor::matrix(history.len(), HISTORY_COLUMNS.len(), data)
}

pub fn tensor_to_history(t: &Tensor) -> Result<Vec<EpochRecord>> {
    if t.rows() == 0 {
        return Ok(Vec::new());
    }
    t.expect_matrix(None, HISTORY_COLUMNS.len(), "loss history")?;
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let phase = match r[1] as u8 {
                1 => Phase::Warmup,
                2 => Phase::Ramp,
                3 => Phase::Final,
                p => return Err(Error::Parameter(format!("history row {i}: unknown phase {p}"))),
            };
            Ok(EpochRecord {
                epoch: r[0] as usize,
                phase,
                loss: LossBreakdown {
                    recon_c: r[2],
                    kl_c: r[3],
                    recon_g: r[4],
                    kl_g: r[5],
                    mdn: r[6],
                    embed: r[7],
                    total: r[8],
                },
                weights: LossWeights { recon: r[9], kl: r[10], mdn: r[11], embed: r[12] },
            })
        })
        .collect()
}

/// Training arrays: fields plus one embedding matrix per guided layer.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub x_c: &'a Tensor,
    pub x_g: &'a Tensor,
    pub targets: Vec<Tensor>,
}

/// Projects the dataset features through each embedding, one per guided
/// layer in order.
pub fn prepare_targets(dataset: &ScatteredDataset, lpps: &[LppModel], config: &CdvaeConfig) -> Result<Vec<Tensor>> {
    let layers = config.guided_layers();
    if lpps.len() != layers.len() {
        return Err(Error::Parameter(format!("{} embeddings for {} guided layers", lpps.len(), layers.len())));
    }
    layers
        .iter()
        .zip(lpps)
        .map(|(&l, m)| {
            let dim = config.cond.latent_dims[l];
            if m.embed_dim() > dim {
                return Err(Error::Parameter(format!(
                    "embedding of dim {} exceeds latent layer {l} of width {dim}",
                    m.embed_dim()
                )));
            }
            m.project_rows(&dataset.features)
        })
        .collect()
}

/// Resumable training state. Epoch `e` draws its shuffle and noise from its
/// own stream, so stopping and resuming reproduces an uninterrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub params: CdvaeParams,
    pub adam: Adam,
    pub schedule: TrainSchedule,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(params: CdvaeParams, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let mut adam = Adam::new(&params, AdamConfig { lr: schedule.lr, ..AdamConfig::default() });
        let mut n_mdn = 0;
        params.mdn.visit(&mut |_, _| n_mdn += 1);
        let total = adam.states.len();
        for s in &mut adam.states[total - n_mdn..] {
            s.weight_decay = schedule.mdn_weight_decay;
        }
        Ok(Self { params, adam, schedule, epoch: 0, history: Vec::new() })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.schedule.total_epochs()
    }

    pub fn step_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochRecord> {
        let n = data.x_c.rows();
        if n == 0 {
            return Err(Error::Parameter("training set is empty".into()));
        }
        if data.x_g.rows() != n || data.targets.iter().any(|t| t.rows() != n) {
            return Err(Error::Dimension("training arrays have different row counts".into()));
        }
        let epoch = self.epoch;
        for (term, t) in [("x_c", data.x_c), ("x_g", data.x_g)].into_iter().chain(data.targets.iter().map(|t| ("embedding target", t))) {
            if !t.all_finite() {
                return Err(Error::NonFinite { term: term.into(), epoch });
            }
        }
        let (phase, weights) = self.schedule.weights_at(epoch);
        let mut r = rng::stream(self.schedule.seed, rng::streams::TRAIN_BASE + epoch as u64);
        let mut acc = LossBreakdown::zero();
        for idx in epoch_batches(n, self.schedule.batch_size, &mut r) {
            let xc = data.x_c.select_rows(&idx);
            let xg = data.x_g.select_rows(&idx);
            let ps: Vec<Tensor> = data.targets.iter().map(|t| t.select_rows(&idx)).collect();
            let noise = CdvaeNoise::sample(&self.params.config, idx.len(), &mut r);
            let b = match total_loss_grad(&xc, &xg, &ps, &mut self.params, &weights, &noise) {
                Err(Error::Domain(msg)) => {
                    let op = msg.split(':').next().unwrap_or("forward");
                    return Err(Error::NonFinite { term: format!("{op} (forward pass)"), epoch });
                }
                other => other?,
            };
            if let Some(term) = b.non_finite_term() {
                return Err(Error::NonFinite { term: term.into(), epoch });
            }
            self.adam.step(&mut self.params);
            if !self.params.all_finite() {
                return Err(Error::NonFinite { term: "parameters".into(), epoch });
            }
            acc.scaled_add(&b, idx.len() as f64 / n as f64);
        }
        let rec = EpochRecord { epoch, phase, weights, loss: acc };
        self.history.push(rec);
        self.epoch += 1;
        Ok(rec)
    }

    /// Runs until `until` epochs (capped by the schedule) have completed.
    pub fn run_until(
        &mut self,
        data: &TrainData<'_>,
        until: usize,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        let stop = until.min(self.schedule.total_epochs());
        while self.epoch < stop {
            let rec = self.step_epoch(data)?;
            on_epoch(&rec);
        }
        Ok(())
    }
}

/// Initializes from `schedule.seed`, fits the full schedule and returns the
/// parameters with the per-epoch history.
pub fn train(
    dataset: &ScatteredDataset,
    schedule: &TrainSchedule,
    lpps: &[LppModel],
    config: &CdvaeConfig,
) -> Result<(CdvaeParams, Vec<EpochRecord>)> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let params = CdvaeParams::init(config, &mut rng::stream(schedule.seed, rng::streams::INIT))?;
    let targets = prepare_targets(dataset, lpps, config)?;
    let data = TrainData { x_c: &dataset.x_c, x_g: &dataset.x_g, targets };
    let mut t = Trainer::new(params, schedule.clone())?;
    t.run_until(&data, usize::MAX, |_| {})?;
    Ok((t.params, t.history))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_config;
    use super::*;

    fn toy_data(n: usize) -> (Tensor, Tensor, Vec<Tensor>) {
        let mut r = rng::stream(11, 0);
        let xc = rng::normal_tensor(&mut r, n, 5).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let xg = rng::normal_tensor(&mut r, n, 6).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let p = rng::normal_tensor(&mut r, n, 3);
        (xc, xg, vec![p])
    }

    fn schedule(p1: usize, p2: usize, p3: usize) -> TrainSchedule {
        TrainSchedule { lr: 3e-3, phase1_epochs: p1, phase2_epochs: p2, phase3_epochs: p3, batch_size: 8, seed: 4, ..Default::default() }
    }

    #[test]
    fn ramp_hits_both_ends() {
        let s = schedule(2, 4, 1);
        assert_eq!(s.weights_at(0), (Phase::Warmup, LossWeights::INITIAL));
        assert_eq!(s.weights_at(1).0, Phase::Warmup);
        let (ph, w) = s.weights_at(2);
        assert_eq!(ph, Phase::Ramp);
        assert!((w.embed - (10.0 + (0.5 - 10.0) * 0.25)).abs() < 1e-12);
        assert_eq!(s.weights_at(5).1, LossWeights::FINAL);
        assert_eq!(s.weights_at(6), (Phase::Final, LossWeights::FINAL));
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (xc, xg, p) = toy_data(16);
        let params = CdvaeParams::init(&toy_config(), &mut rng::stream(1, 0)).unwrap();
        let mut t = Trainer::new(params.clone(), schedule(0, 0, 0)).unwrap();
        t.run_until(&TrainData { x_c: &xc, x_g: &xg, targets: p }, usize::MAX, |_| {}).unwrap();
        assert_eq!(t.params, params);
        assert!(t.history.is_empty());
    }

    #[test]
    fn identical_seeds_identical_runs_and_resume_matches() {
        let (xc, xg, p) = toy_data(20);
        let params = CdvaeParams::init(&toy_config(), &mut rng::stream(1, 0)).unwrap();
        let data = TrainData { x_c: &xc, x_g: &xg, targets: p };
        let mut a = Trainer::new(params.clone(), schedule(2, 2, 2)).unwrap();
        a.run_until(&data, usize::MAX, |_| {}).unwrap();
        let mut b = Trainer::new(params.clone(), schedule(2, 2, 2)).unwrap();
        b.run_until(&data, usize::MAX, |_| {}).unwrap();
        assert_eq!(a, b);

        let mut c = Trainer::new(params, schedule(2, 2, 2)).unwrap();
        c.run_until(&data, 3, |_| {}).unwrap();
        let mut resumed = c.clone();
        resumed.run_until(&data, usize::MAX, |_| {}).unwrap();
        assert_eq!(resumed, a);
        assert_eq!(a.history.len(), 6);
        for r in &a.history {
            assert!((r.loss.total - r.loss.recompose(&r.weights)).abs() < 1e-9 * r.loss.total.abs().max(1.0));
        }
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let (xc, xg, p) = toy_data(64);
        let params = CdvaeParams::init(&toy_config(), &mut rng::stream(2, 0)).unwrap();
        let mut t = Trainer::new(params, TrainSchedule { lr: 1e-2, ..schedule(10, 10, 40) }).unwrap();
        t.run_until(&TrainData { x_c: &xc, x_g: &xg, targets: p }, usize::MAX, |_| {}).unwrap();
        let first = t.history.first().unwrap().loss.total;
        let last = t.history.last().unwrap().loss.total;
        assert!(last < first, "{first} -> {last}");
        assert!(t.history.iter().all(|r| r.loss.non_finite_term().is_none()));
    }

    #[test]
    fn history_tensor_round_trip() {
        let (xc, xg, p) = toy_data(8);
        let params = CdvaeParams::init(&toy_config(), &mut rng::stream(3, 0)).unwrap();
        let mut t = Trainer::new(params, schedule(1, 1, 1)).unwrap();
        t.run_until(&TrainData { x_c: &xc, x_g: &xg, targets: p }, usize::MAX, |_| {}).unwrap();
        let h = history_to_tensor(&t.history);
        assert_eq!(tensor_to_history(&h).unwrap(), t.history);
    }

    #[test]
    fn empty_and_non_finite_inputs() {
        let params = CdvaeParams::init(&toy_config(), &mut rng::stream(3, 0)).unwrap();
        let mut t = Trainer::new(params.clone(), schedule(1, 0, 0)).unwrap();
        let e5 = Tensor::zeros(&[0, 5]);
        let e6 = Tensor::zeros(&[0, 6]);
        let data = TrainData { x_c: &e5, x_g: &e6, targets: vec![Tensor::zeros(&[0, 3])] };
        assert!(matches!(t.step_epoch(&data), Err(Error::Parameter(_))));

        let (mut xc, xg, p) = toy_data(8);
        xc.set(0, 0, f64::NAN);
        let mut t = Trainer::new(params, schedule(1, 0, 0)).unwrap();
        match t.step_epoch(&TrainData { x_c: &xc, x_g: &xg, targets: p }) {
            Err(Error::NonFinite { term, epoch: 0 }) => assert_eq!(term, "x_c"),
            other => panic!("{other:?}"),
        }
    }
}
