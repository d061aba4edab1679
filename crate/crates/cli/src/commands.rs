use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cdvae_core::baselines::{
    cvae_sample_pools, cvae_train, nn_predict, regression_pools, regression_train, CvaeParams, NnIndex,
    RegressionParams,
};
use cdvae_core::cdvae::{
    cond_reconstruction, history_to_tensor, prepare_targets, sample_pools, tensor_to_history, CdvaeParams,
    EpochRecord, TrainData, Trainer, HISTORY_COLUMNS,
};
use cdvae_core::checkpoint::{export_params, import_params, Checkpoint};
use cdvae_core::data::{
    generate, ingest_relight_dir, ingest_resaturation_dir, load_dataset, save_dataset, SyntheticSpec,
};
use cdvae_core::embedding::{lpp_fit, GraphWeights, LppModel, LppParams};
use cdvae_core::eval::{evaluate_method, make_report, ErrorNorm, PoolSet, SamplePool};
use cdvae_core::numerics::{rng, Tensor};
use cdvae_core::postprocess::{detail_composite, upsample_for_viewing, write_field_pgm};
use cdvae_core::{Error, ScatteredDataset};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, DEFAULT_TEST_ROWS};
use crate::{Norm, SampleModel, TrainModel};

/// Misuse of the command line or mismatched inputs; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// 2: configuration or input mismatch, 3: IO or unreadable file,
/// 4: numerical failure.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Error>() {
            return match c {
                Error::Io(_) | Error::Format { .. } => 3,
                Error::NonFinite { .. } | Error::Domain(_) => 4,
                Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Report(_) => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn read_dataset(path: &Path) -> Result<ScatteredDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ImageKind {
    Relight,
    Resaturation,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageSpec {
    images: ImageKind,
    dir: PathBuf,
    #[serde(default = "default_side")]
    side: usize,
}

fn default_side() -> usize {
    32
}

pub fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading spec {}", spec_path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let ds = if value.get("images").is_some() {
        let spec: ImageSpec = serde_json::from_value(value).context("image directory spec")?;
        let dir = if spec.dir.is_relative() {
            spec_path.parent().unwrap_or(Path::new(".")).join(&spec.dir)
        } else {
            spec.dir.clone()
        };
        match spec.images {
            ImageKind::Relight => ingest_relight_dir(&dir, spec.side),
            ImageKind::Resaturation => ingest_resaturation_dir(&dir, spec.side),
        }
        .with_context(|| format!("ingesting {}", dir.display()))?
    } else {
        let spec: SyntheticSpec = serde_json::from_value(value).context("synthetic spec")?;
        generate(&spec)?
    };
    save_dataset(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    println!("rows {}", ds.len());
    println!("sha256 {}", sha256_hex(&ds.to_bytes()));
    Ok(())
}

pub fn embed_fit(data: &Path, out: &Path, k: usize, dim: usize, heat: bool, test_rows: usize) -> Result<()> {
    let ds = read_dataset(data)?;
    if test_rows >= ds.len() {
        return usage(format!("test_rows {test_rows} leaves no training rows out of {}", ds.len()));
    }
    let (train, _) = ds.split(test_rows);
    let weights = if heat { GraphWeights::Heat { t: None } } else { GraphWeights::Binary };
    let model = lpp_fit(&train.features, &LppParams { k, embed_dim: dim, weights })?;
    model.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("fitted on {} rows, k {}, dim {}", model.n_train, model.k, model.embed_dim());
    println!("max eigen-residual {:.3e}", model.max_residual);
    println!("regularization {:.3e}", model.reg_eps);
    let shown: Vec<String> = model.eigenvalues.iter().take(8).map(|v| format!("{v:.6}")).collect();
    println!("smallest eigenvalues {}", shown.join(" "));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: String,
    config: RunConfig,
    data_sha256: String,
    embeddings_sha256: Vec<String>,
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub data: &'a Path,
    pub embeddings: &'a [PathBuf],
    pub out: &'a Path,
    pub model: TrainModel,
    pub resume: Option<&'a Path>,
    pub stop_after: Option<usize>,
    pub history: Option<&'a Path>,
    pub quiet: bool,
}

fn model_name(m: TrainModel) -> &'static str {
    match m {
        TrainModel::Cdvae => "cdvae",
        TrainModel::Cvae => "cvae",
        TrainModel::Regression => "regression",
    }
}

fn progress_line(r: &EpochRecord) -> String {
    let l = &r.loss;
    format!(
        "epoch {} phase {} total {:.6} recon_c {:.6} kl_c {:.6} recon_g {:.6} kl_g {:.6} mdn {:.6} embed {:.6}",
        r.epoch, r.phase as u8, l.total, l.recon_c, l.kl_c, l.recon_g, l.kl_g, l.mdn, l.embed
    )
}

fn history_csv(meta: &str, columns: &[&str], rows: &Tensor) -> String {
    let mut s = format!("# {meta}\n{}\n", columns.join(","));
    for i in 0..rows.rows() {
        let cells: Vec<String> = rows.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn train(a: TrainArgs<'_>) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let ds = read_dataset(a.data)?;
    if a.model == TrainModel::Cdvae {
        cfg.check_data(&ds)?;
    } else if cfg.eval.test_rows >= ds.len() {
        return usage(format!("test_rows {} leaves no training rows out of {}", cfg.eval.test_rows, ds.len()));
    }
    if a.model != TrainModel::Cdvae && (a.resume.is_some() || a.stop_after.is_some()) {
        return usage("--resume and --stop-after apply to --model cdvae only");
    }
    let (train_ds, _) = ds.split(cfg.eval.test_rows);
    let embeddings_sha256 = a.embeddings.iter().map(|p| file_sha256(p)).collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta {
        model: model_name(a.model).into(),
        config: cfg.clone(),
        data_sha256: file_sha256(a.data)?,
        embeddings_sha256,
    };
    let meta_json = serde_json::to_string(&meta)?;
    let history_path = a.history.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(a.out, ".history.csv"));

    let (ck, csv) = match a.model {
        TrainModel::Cdvae => {
            let lpps = a
                .embeddings
                .iter()
                .map(|p| LppModel::load(p).with_context(|| format!("loading embedding {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            for (p, m) in a.embeddings.iter().zip(&lpps) {
                if m.n_train != train_ds.len() {
                    return usage(format!(
                        "embedding {} was fitted on {} rows, the training split has {}",
                        p.display(),
                        m.n_train,
                        train_ds.len()
                    ));
                }
            }
            let targets = prepare_targets(&train_ds, &lpps, &cfg.model)?;
            let data = TrainData { x_c: &train_ds.x_c, x_g: &train_ds.x_g, targets };
            let mut trainer = match a.resume {
                Some(path) => resume_trainer(path, &meta, &cfg)?,
                None => {
                    let params =
                        CdvaeParams::init(&cfg.model, &mut rng::stream(cfg.schedule.seed, rng::streams::INIT))?;
                    Trainer::new(params, cfg.schedule.clone())?
                }
            };
            let mut last_phase = trainer.history.last().map(|r| r.phase);
            let quiet = a.quiet;
            trainer.run_until(&data, a.stop_after.unwrap_or(usize::MAX), |r| {
                if !quiet {
                    if last_phase != Some(r.phase) {
                        eprintln!("phase {} begins at epoch {}", r.phase as u8, r.epoch);
                        last_phase = Some(r.phase);
                    }
                    eprintln!("{}", progress_line(r));
                }
            })?;
            let history = history_to_tensor(&trainer.history);
            let csv = history_csv(&meta_json, &HISTORY_COLUMNS, &history);
            let ck = Checkpoint {
                meta: meta_json,
                tensors: export_params(&trainer.params),
                adam: trainer.adam.states.clone(),
                epoch: trainer.epoch as u64,
                history,
            };
            (ck, csv)
        }
        TrainModel::Cvae | TrainModel::Regression => {
            let (tensors, losses) = if a.model == TrainModel::Cvae {
                let (p, h) = cvae_train(&train_ds, &cfg.cvae_config(&ds), &cfg.baseline_fit)?;
                (export_params(&p), h)
            } else {
                let (p, h) = regression_train(&train_ds, &cfg.regression_config(&ds), &cfg.baseline_fit)?;
                (export_params(&p), h)
            };
            if !a.quiet {
                for (e, l) in losses.iter().enumerate() {
                    eprintln!("epoch {e} loss {l:.6}");
                }
            }
            let rows: Vec<f64> = losses.iter().enumerate().flat_map(|(e, &l)| [e as f64, l]).collect();
            let history = Tensor::matrix(losses.len(), 2, rows);
            let csv = history_csv(&meta_json, &["epoch", "loss"], &history);
            (Checkpoint { meta: meta_json, tensors, adam: Vec::new(), epoch: losses.len() as u64, history }, csv)
        }
    };
    ck.save(a.out).with_context(|| format!("writing {}", a.out.display()))?;
    fs::write(&history_path, csv).with_context(|| format!("writing {}", history_path.display()))?;
    println!("checkpoint {} after epoch {}", a.out.display(), ck.epoch);
    println!("history {}", history_path.display());
    Ok(())
}

fn parse_meta(ck: &Checkpoint, path: &Path) -> Result<CheckpointMeta> {
    serde_json::from_str(&ck.meta).map_err(|e| UsageError(format!("checkpoint {} metadata: {e}", path.display())).into())
}

fn resume_trainer(path: &Path, meta: &CheckpointMeta, cfg: &RunConfig) -> Result<Trainer> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let old = parse_meta(&ck, path)?;
    if old.model != "cdvae" || old.config != meta.config {
        return usage(format!("checkpoint {} was produced by a different model or config", path.display()));
    }
    if old.data_sha256 != meta.data_sha256 || old.embeddings_sha256 != meta.embeddings_sha256 {
        return usage(format!("checkpoint {} was trained on different data or embeddings", path.display()));
    }
    let mut params = CdvaeParams::init(&cfg.model, &mut rng::stream(0, 0))?;
    import_params(&mut params, &ck.tensors)?;
    let mut t = Trainer::new(params, cfg.schedule.clone())?;
    if ck.adam.len() != t.adam.states.len() {
        return usage("checkpoint optimizer state does not match the model");
    }
    t.adam.states = ck.adam;
    t.epoch = ck.epoch as usize;
    t.history = tensor_to_history(&ck.history)?;
    Ok(t)
}

pub struct SampleArgs<'a> {
    pub ckpt: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub n: usize,
    pub seed: u64,
    pub model: Option<SampleModel>,
    pub k: Option<usize>,
    pub blur: f64,
    pub test_rows: Option<usize>,
    pub composite: Option<&'a Path>,
    pub composite_count: usize,
    pub view_factor: usize,
}

enum Loaded {
    Cdvae(Box<CdvaeParams>),
    Cvae(Box<CvaeParams>),
    Regression(Box<RegressionParams>),
}

pub fn sample(a: SampleArgs<'_>) -> Result<()> {
    if a.n == 0 {
        return usage("--n must be positive");
    }
    let ds = read_dataset(a.data)?;
    let ck = match a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let meta = parse_meta(&ck, p)?;
            Some((ck, meta, file_sha256(p)?))
        }
        None => None,
    };
    let ck_model = ck.as_ref().map(|(_, m, _)| m.model.as_str());
    let model = match (a.model, ck_model) {
        (Some(SampleModel::Nn), _) => SampleModel::Nn,
        (Some(m), Some(name)) if sample_name(m) != name => {
            return usage(format!("--model {} but the checkpoint holds a {name} model", sample_name(m)))
        }
        (Some(m), _) => m,
        (None, Some("cdvae")) => SampleModel::Cdvae,
        (None, Some("cvae")) => SampleModel::Cvae,
        (None, Some("regression")) => SampleModel::Regression,
        (None, Some(other)) => return usage(format!("checkpoint holds unknown model `{other}`")),
        (None, None) => return usage("--ckpt is required unless --model nn"),
    };
    let test_rows = match (ck.as_ref().map(|(_, m, _)| m.config.eval.test_rows), a.test_rows) {
        (Some(c), Some(f)) if c != f => {
            return usage(format!("--test-rows {f} differs from the checkpoint's {c}"));
        }
        (Some(c), _) => c,
        (None, f) => f.unwrap_or(DEFAULT_TEST_ROWS),
    };
    if test_rows == 0 || test_rows >= ds.len() {
        return usage(format!("test_rows {test_rows} must be in 1..{}", ds.len()));
    }
    let data_sha = file_sha256(a.data)?;
    if ck.as_ref().is_some_and(|(_, m, _)| m.data_sha256 != data_sha) {
        eprintln!("warning: dataset differs from the one the checkpoint was trained on");
    }
    let (train, test) = ds.split(test_rows);

    let loaded = match (model, &ck) {
        (SampleModel::Nn, _) => None,
        (_, None) => return usage("--ckpt is required unless --model nn"),
        (SampleModel::Cdvae, Some((c, m, _))) => {
            m.config.check_data(&ds)?;
            let mut p = CdvaeParams::init(&m.config.model, &mut rng::stream(0, 0))?;
            import_params(&mut p, &c.tensors)?;
            Some(Loaded::Cdvae(Box::new(p)))
        }
        (SampleModel::Cvae, Some((c, m, _))) => {
            let mut p = CvaeParams::init(&m.config.cvae_config(&ds), &mut rng::stream(0, 0))?;
            import_params(&mut p, &c.tensors)?;
            Some(Loaded::Cvae(Box::new(p)))
        }
        (SampleModel::Regression, Some((c, m, _))) => {
            let mut p = RegressionParams::init(&m.config.regression_config(&ds), &mut rng::stream(0, 0))?;
            import_params(&mut p, &c.tensors)?;
            Some(Loaded::Regression(Box::new(p)))
        }
    };
    if a.composite.is_some() && !matches!(loaded, Some(Loaded::Cdvae(_))) {
        return usage("--composite needs a cdvae checkpoint");
    }

    let k = a.k.unwrap_or(a.n);
    let samples: Vec<Tensor> = match &loaded {
        None => {
            let index = NnIndex::from_dataset(&train)?;
            (0..test.len()).map(|r| nn_predict(test.x_c.row(r), &index, k, a.blur)).collect::<Result<_, _>>()?
        }
        Some(Loaded::Cdvae(p)) => sample_pools(p, &test.x_c, a.n, a.seed)?,
        Some(Loaded::Cvae(p)) => cvae_sample_pools(p, &test.x_c, a.n, a.seed)?,
        Some(Loaded::Regression(p)) => regression_pools(p, &test.x_c, a.n)?,
    };
    let pools = samples
        .into_iter()
        .enumerate()
        .map(|(r, s)| SamplePool::new(s, test.x_g.row(r).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut meta = json!({
        "model": sample_name(model),
        "seed": a.seed,
        "n": if model == SampleModel::Nn { k } else { a.n },
        "test_rows": test_rows,
        "data_sha256": data_sha,
    });
    if model == SampleModel::Nn {
        meta["blur_sigma"] = json!(a.blur);
    }
    if let Some((_, m, sha)) = &ck {
        meta["checkpoint_sha256"] = json!(sha);
        meta["checkpoint"] = serde_json::to_value(m)?;
    }
    let meta_json = serde_json::to_string(&meta)?;
    let set = PoolSet { meta: meta_json.clone(), method: sample_name(model).into(), side: ds.meta.side, pools };
    set.save(a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("pools {} rows {} samples {}", a.out.display(), set.pools.len(), set.pools[0].len());

    if let (Some(dir), Some(Loaded::Cdvae(p))) = (a.composite, &loaded) {
        write_composites(dir, p, &test, &set, &meta_json, a.composite_count, a.view_factor)?;
    }
    Ok(())
}

fn sample_name(m: SampleModel) -> &'static str {
    match m {
        SampleModel::Cdvae => "cdvae",
        SampleModel::Cvae => "cvae",
        SampleModel::Nn => "nn",
        SampleModel::Regression => "regression",
    }
}

fn write_composites(
    dir: &Path,
    params: &CdvaeParams,
    test: &ScatteredDataset,
    set: &PoolSet,
    meta: &str,
    count: usize,
    view_factor: usize,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let side = test.meta.side;
    let recon = cond_reconstruction(&test.x_c, params)?;
    let mut written = 0;
    for (r, pool) in set.pools.iter().enumerate() {
        let i_c = Tensor::matrix(1, side * side, test.x_c.row(r).to_vec());
        let rc = Tensor::matrix(1, side * side, recon.row(r).to_vec());
        for j in 0..count.min(pool.len()) {
            let gen = Tensor::matrix(1, side * side, pool.samples().row(j).to_vec());
            let comp = detail_composite(&gen, &i_c, &rc)?;
            write_field_pgm(&dir.join(format!("row{r:04}_sample{j:03}.pgm")), comp.data(), side)?;
            if view_factor > 0 {
                let v = upsample_for_viewing(comp.data(), side, view_factor)?;
                let name = format!("row{r:04}_sample{j:03}_{}.pgm", v.label.replace(' ', "_"));
                write_field_pgm(&dir.join(name), &v.data, v.side)?;
            }
            written += 1;
        }
    }
    let note = json!({
        "source": serde_json::from_str::<Value>(meta)?,
        "composited": written,
        "note": "detail-composited outputs for inspection; metrics use the raw pools",
    });
    fs::write(dir.join("composite.json"), serde_json::to_string_pretty(&note)?)?;
    println!("composites {} files in {}", written, dir.display());
    Ok(())
}

pub fn eval(paths: &[PathBuf], out: &Path, counts: &[usize], norm: Norm) -> Result<()> {
    let norm = match norm {
        Norm::L1 => ErrorNorm::L1,
        Norm::L2 => ErrorNorm::L2,
    };
    let sets = paths
        .iter()
        .map(|p| PoolSet::load(p).with_context(|| format!("loading pools {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let first = &sets[0];
    for (p, s) in paths.iter().zip(&sets).skip(1) {
        let same_truth = s.pools.len() == first.pools.len()
            && s.pools.iter().zip(&first.pools).all(|(a, b)| a.ground_truth() == b.ground_truth());
        if s.side != first.side || !same_truth {
            return usage(format!("pools in {} cover different inputs than {}", p.display(), paths[0].display()));
        }
    }
    let methods = sets
        .iter()
        .map(|s| evaluate_method(&s.method, &s.pools, counts, s.side, norm))
        .collect::<Result<Vec<_>, _>>()?;
    let report = make_report(methods, counts)?;
    let table = report.render_table();
    let mut text = table.clone();
    text.push('\n');
    let mut csv = String::new();
    for (p, s) in paths.iter().zip(&sets) {
        let line = format!("source {} method {} meta {}\n", p.display(), s.method, s.meta);
        text.push_str(&line);
        csv.push_str("# ");
        csv.push_str(&line);
    }
    csv.push_str(&report.to_csv());
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = out.with_extension("csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{table}");
    Ok(())
}
