//! `cdvae` command-line tool: data generation, embedding fit, training,
//! sampling and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdvae", version, about = "Conditional generative modelling of ambiguous image-to-field tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainModel {
    Cdvae,
    Cvae,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleModel {
    Cdvae,
    Cvae,
    Nn,
    Regression,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset or ingest an image directory.
    GenData {
        /// JSON generator spec, or `{"images": "relight" | "resaturation", "dir": ..., "side": 32}`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the locality-preserving embedding on the training rows' features.
    EmbedFit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Heat-kernel edge weights instead of binary.
        #[arg(long)]
        heat: bool,
        #[arg(long, default_value_t = config::DEFAULT_TEST_ROWS)]
        test_rows: usize,
    },
    /// Train a model and write a checkpoint plus a loss-history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One per guided layer; required for cdvae.
        #[arg(long)]
        embedding: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TrainModel::Cdvae)]
        model: TrainModel,
        /// Continue from a partial cdvae checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (cdvae).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw sample pools for every held-out row.
    Sample {
        /// Not needed for `--model nn`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the checkpoint's model.
        #[arg(long, value_enum)]
        model: Option<SampleModel>,
        /// Neighbours returned by `--model nn`; defaults to `--n`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = cdvae_core::baselines::DEFAULT_BLUR_SIGMA)]
        blur: f64,
        /// Held-out rows when no checkpoint supplies them.
        #[arg(long)]
        test_rows: Option<usize>,
        /// Write detail-composited PGMs (cdvae only) into this directory.
        #[arg(long)]
        composite: Option<PathBuf>,
        /// Composited samples written per row.
        #[arg(long, default_value_t = 3)]
        composite_count: usize,
        /// Bilinear upsampling factor of the extra viewing-only PGMs; 0 disables them.
        #[arg(long, default_value_t = 4)]
        view_factor: usize,
    },
    /// Compute best-of-n error and grid variance for one or more pool files.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        pools: Vec<PathBuf>,
        /// Table text; a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = cdvae_core::eval::SAMPLE_COUNTS.to_vec())]
        counts: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Norm::L1)]
        norm: Norm,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Norm {
    L1,
    L2,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::EmbedFit { data, out, k, dim, heat, test_rows } => {
            commands::embed_fit(&data, &out, k, dim, heat, test_rows)
        }
        Command::Train { config, data, embedding, out, model, resume, stop_after, history, quiet } => {
            commands::train(commands::TrainArgs {
                config: &config,
                data: &data,
                embeddings: &embedding,
                out: &out,
                model,
                resume: resume.as_deref(),
                stop_after,
                history: history.as_deref(),
                quiet,
            })
        }
        Command::Sample {
            ckpt,
            data,
            out,
            n,
            seed,
            model,
            k,
            blur,
            test_rows,
            composite,
            composite_count,
            view_factor,
        } => commands::sample(commands::SampleArgs {
            ckpt: ckpt.as_deref(),
            data: &data,
            out: &out,
            n,
            seed,
            model,
            k,
            blur,
            test_rows,
            composite: composite.as_deref(),
            composite_count,
            view_factor,
        }),
        Command::Eval { pools, out, counts, norm } => commands::eval(&pools, &out, &counts, norm),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
