//! Command-line front-end: `generate`, `train`, `predict`, `evaluate`, `repro`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.

pub mod checkpoint;
pub mod experiment;
pub mod files;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, scatter_data, write_csv};
use crate::inference::DEFAULT_PASSES;
use crate::models::Variant;
use crate::par::Parallelism;
use checkpoint::Checkpoint;
use experiment::{
    predict_dataset, prepare_data, run_variants, summary_row, train_variant, ExperimentConfig, Suite, SummaryRow,
};
use files::{
    file_sha256, read_dataset_file, read_json, read_predictions, sha256_hex, write_atomic, write_dataset_files,
    write_json, write_predictions, PredictionMeta,
};

#[derive(Debug, Parser)]
#[command(name = "bayescope", version, about = "Variational Bayesian regression with epistemic/aleatoric uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON). Defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the composite seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its train/test split.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model variant and write a checkpoint plus the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training data: a dataset CSV or a `generate` output directory. Default: generated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the model variant of the configuration.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run sampled forward passes and write per-sample uncertainty reports.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV to predict.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PASSES)]
        passes: usize,
        /// Base seed of the per-sample noise streams. Default: stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions: report JSON plus scatter and profile CSVs.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset the predictions were made on; checked against the stored targets.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run generate/train/predict/evaluate for all four variants of a suite.
    Repro {
        #[arg(long)]
        suite: Suite,
        #[command(flatten)]
        common: Common,
        /// Worker threads for the variants (capped by BAYESCOPE_THREADS).
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg_out: Option<&PathBuf>, flag: Option<&PathBuf>) -> PathBuf {
    flag.or(cfg_out).cloned().unwrap_or_else(|| PathBuf::from("."))
}

/// `manifest.json` written by `generate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub n_total: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub files: BTreeMap<String, String>,
}

pub fn cmd_generate(common: &Common) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let dir = out_dir(cfg.out_dir.as_ref(), common.out.as_ref());
    let data = prepare_data(&cfg)?;
    let mut files = BTreeMap::new();
    for (name, ds) in [("dataset", &data.full), ("train", &data.train), ("test", &data.test)] {
        for p in write_dataset_files(&dir, name, ds)? {
            let key = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            files.insert(key, file_sha256(&p)?);
        }
    }
    let mut hashed = cfg.clone();
    hashed.out_dir = None;
    let manifest = Manifest {
        config_hash: sha256_hex(&hashed.canonical_json()?),
        config: hashed,
        n_total: data.full.len(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!("wrote {} samples to {}", data.full.len(), dir.display());
    Ok(dir)
}

pub fn cmd_train(common: &Common, data: Option<&Path>, variant: Option<Variant>) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    cfg.validate()?;
    let dir = out_dir(cfg.out_dir.as_ref(), common.out.as_ref());
    let train = match data {
        Some(p) if p.is_dir() => read_dataset_file(&p.join("train.csv"))?,
        Some(p) => read_dataset_file(p)?,
        None => prepare_data(&cfg)?.train,
    };
    let (model, log) = train_variant(&cfg, cfg.model.variant, &train)?;
    let train_seed = cfg.train_config().seed;
    write_atomic(&dir.join("train_log.csv"), |w| log.write_csv(w))?;
    let path = dir.join("checkpoint.json");
    Checkpoint::from_model(&model, train_seed, cfg.predict_seed(), &log).save(&path)?;
    log::info!("{} trained for {} epochs; checkpoint at {}", cfg.model.variant, log.len(), path.display());
    Ok(path)
}

pub fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    passes: usize,
    seed: Option<u64>,
    parallel: usize,
    out: Option<&Path>,
) -> Result<PathBuf> {
    if passes < 1 {
        return Err(Error::Config("passes must be at least 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let ds = read_dataset_file(data)?;
    let seed = seed.unwrap_or(ck.predict_seed);
    let reports = predict_dataset(&model, &ds, passes, seed, Parallelism::capped(parallel))?;
    let path = out.unwrap_or(Path::new(".")).join("predictions.csv");
    let meta = PredictionMeta {
        variant: model.variant(),
        passes,
        seed,
        aleatoric_learned: model.variant().has_sigma(),
    };
    write_predictions(&path, &reports, &ds.ages, &meta)?;
    Ok(path)
}

pub fn cmd_evaluate(predictions: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let (reports, ages, meta) = read_predictions(predictions)?;
    if let Some(d) = data {
        let ds = read_dataset_file(d)?;
        if ds.ages.len() != ages.len() || ds.ages.iter().zip(&ages).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Format("predictions do not match the dataset targets".into()));
        }
    }
    let variant = meta.map_or_else(|| "unknown".to_string(), |m| m.variant.name().to_string());
    let report = evaluate(&variant, &reports, &ages)?;
    let dir = out.unwrap_or(Path::new(".")).to_path_buf();
    write_json(&dir.join("report.json"), &report)?;
    let scatter = scatter_data(&reports, &ages)?;
    write_atomic(&dir.join("scatter.csv"), |w| write_csv(w, &scatter))?;
    write_atomic(&dir.join("profile.csv"), |w| write_csv(w, &report.profile))?;
    Ok(dir.join("report.json"))
}

/// `summary.json` written by `repro`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReproSummary {
    pub suite: Suite,
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
}

pub fn cmd_repro(suite: Suite, common: &Common, parallel: usize) -> Result<PathBuf> {
    let base = load_config(common)?;
    let cfg = suite.configure(&base);
    cfg.validate()?;
    let dir = out_dir(cfg.out_dir.as_ref(), common.out.as_ref());
    let data = prepare_data(&cfg)?;
    for (name, ds) in [("dataset", &data.full), ("train", &data.train), ("test", &data.test)] {
        write_dataset_files(&dir.join("data"), name, ds)?;
    }
    let runs = run_variants(&cfg, &data, &Variant::ALL, Parallelism::capped(parallel))?;
    let mut rows = Vec::with_capacity(runs.len());
    for run in &runs {
        let vdir = dir.join(run.variant.name());
        Checkpoint::from_model(&run.model, cfg.train_config().seed, cfg.predict_seed(), &run.log)
            .save(&vdir.join("checkpoint.json"))?;
        write_atomic(&vdir.join("train_log.csv"), |w| run.log.write_csv(w))?;
        let meta = PredictionMeta {
            variant: run.variant,
            passes: cfg.passes,
            seed: cfg.predict_seed(),
            aleatoric_learned: run.variant.has_sigma(),
        };
        write_predictions(&vdir.join("predictions.csv"), &run.predictions, &data.test.ages, &meta)?;
        write_json(&vdir.join("report.json"), &run.report)?;
        let scatter = scatter_data(&run.predictions, &data.test.ages)?;
        write_atomic(&vdir.join("scatter.csv"), |w| write_csv(w, &scatter))?;
        write_atomic(&vdir.join("profile.csv"), |w| write_csv(w, &run.report.profile))?;
        rows.push(summary_row(suite, &cfg, &data, run));
    }
    write_atomic(&dir.join("summary.csv"), |w| write_csv(w, &rows))?;
    let mut hashed = cfg.clone();
    hashed.out_dir = None;
    let summary = ReproSummary {
        suite,
        config_hash: sha256_hex(&hashed.canonical_json()?),
        rows,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("suite {suite} written to {}", dir.display());
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&common).map(drop),
        Command::Train { common, data, variant } => cmd_train(&common, data.as_deref(), variant).map(drop),
        Command::Predict {
            checkpoint,
            data,
            passes,
            seed,
            parallel,
            out,
        } => cmd_predict(&checkpoint, &data, passes, seed, parallel, out.as_deref()).map(drop),
        Command::Evaluate { predictions, data, out } => {
            cmd_evaluate(&predictions, data.as_deref(), out.as_deref()).map(drop)
        }
        Command::Repro {
            suite,
            common,
            parallel,
        } => cmd_repro(suite, &common, parallel).map(drop),
    }
}

/// Reads a `manifest.json`.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}
