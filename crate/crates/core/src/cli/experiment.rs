//! Experiment configuration and the generate → train → predict → evaluate pipeline.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, mean_aleatoric_in, EvalReport};
use crate::inference::{predict_batch, split_samples, UncertaintyReport, DEFAULT_PASSES};
use crate::models::{InputKind, Model, ModelSpec, Variant};
use crate::par::{try_map_indexed, Parallelism};
use crate::probability::PriorSpec;
use crate::synthdata::{generate, split, Channel, DataMode, GeneratorConfig, Split, SynthDataset};
use crate::training::{fit, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub prior: PriorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BcnnSigma,
            hidden: vec![8, 8],
            prior: PriorSpec::default(),
        }
    }
}

/// One file fully determining an experiment.
///
/// `seed` is the only seed that matters: the seeds inside `generator` and
/// `train` are replaced by values derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_frac: f64,
    pub passes: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 2000,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            train_frac: 0.7,
            passes: DEFAULT_PASSES,
            out_dir: None,
        }
    }
}

/// `u64` drawn from `SHA-256(seed ‖ label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.passes < 1 {
            return Err(Error::Config("passes must be at least 1".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        self.model_spec(self.model.variant)?.validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: derive_seed(self.seed, "generate"),
            ..self.generator.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn predict_seed(&self) -> u64 {
        derive_seed(self.seed, "predict")
    }

    pub fn input_kind(&self) -> InputKind {
        match self.generator.mode {
            DataMode::Vector => InputKind::Vector {
                dim: self.generator.channels.len(),
            },
            DataMode::Image => InputKind::Image {
                size: self.generator.image_size,
                channels: 1,
            },
        }
    }

    pub fn model_spec(&self, variant: Variant) -> Result<ModelSpec> {
        let spec = ModelSpec {
            variant,
            input: self.input_kind(),
            hidden: self.model.hidden.clone(),
            prior: self.model.prior,
            seed: self.init_seed(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical JSON bytes; the basis of the manifest's config hash.
    pub fn canonical_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

pub struct PreparedData {
    pub full: SynthDataset,
    pub split: Split,
    pub train: SynthDataset,
    pub test: SynthDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let gen = cfg.generator_config();
    let full = generate(&gen)?;
    let split = split(&full.ages, gen.age_range[0], cfg.train_frac, cfg.split_seed())?;
    if split.test.is_empty() {
        return Err(Error::Config("split produced an empty test set".into()));
    }
    let train = full.subset(&split.train)?;
    let test = full.subset(&split.test)?;
    Ok(PreparedData {
        full,
        split,
        train,
        test,
    })
}

pub fn train_variant(cfg: &ExperimentConfig, variant: Variant, train: &SynthDataset) -> Result<(Model, TrainLog)> {
    fit(cfg.model_spec(variant)?, &train.to_batch()?, &cfg.train_config())
}

pub fn predict_dataset(
    model: &Model,
    ds: &SynthDataset,
    passes: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<UncertaintyReport>> {
    predict_batch(model, &split_samples(&ds.features)?, passes, seed, par)
}

pub struct VariantRun {
    pub variant: Variant,
    pub model: Model,
    pub log: TrainLog,
    pub predictions: Vec<UncertaintyReport>,
    pub report: EvalReport,
}

pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, data: &PreparedData, par: Parallelism) -> Result<VariantRun> {
    let (model, log) = train_variant(cfg, variant, &data.train)?;
    let predictions = predict_dataset(&model, &data.test, cfg.passes, cfg.predict_seed(), par)?;
    let report = evaluate(variant.name(), &predictions, &data.test.ages)?;
    Ok(VariantRun {
        variant,
        model,
        log,
        predictions,
        report,
    })
}

/// Trains and evaluates `variants` on one shared dataset, one worker per variant.
pub fn run_variants(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    variants: &[Variant],
    par: Parallelism,
) -> Result<Vec<VariantRun>> {
    cfg.validate()?;
    try_map_indexed(variants.len(), par, |i| {
        run_variant(cfg, variants[i], data, Parallelism::Sequential)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    BothChannels,
    WristOnly,
}

impl Suite {
    pub const ALL: [Suite; 2] = [Suite::BothChannels, Suite::WristOnly];

    pub fn name(self) -> &'static str {
        match self {
            Suite::BothChannels => "both_channels",
            Suite::WristOnly => "wrist_only",
        }
    }

    pub fn channels(self) -> Vec<Channel> {
        match self {
            Suite::BothChannels => vec![Channel::Wrist, Channel::Clavicle],
            Suite::WristOnly => vec![Channel::Wrist],
        }
    }

    /// `base` with the suite's channel set in vector mode.
    pub fn configure(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.generator.channels = self.channels();
        cfg.generator.mode = DataMode::Vector;
        cfg
    }

    pub fn config(self, seed: u64) -> ExperimentConfig {
        self.configure(&ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?} (expected both_channels or wrist_only)")))
    }
}

/// One row of the suite summary. Contains no timing, so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    pub mae_std: f64,
    pub coverage_z1: f64,
    pub coverage_z2: f64,
    pub mean_epistemic_var: f64,
    pub mean_aleatoric_var: f64,
    pub aleatoric_13_17: Option<f64>,
    pub aleatoric_20_24: Option<f64>,
    /// `aleatoric_20_24 / aleatoric_13_17`.
    pub aleatoric_ratio: Option<f64>,
}

pub fn summary_row(suite: Suite, cfg: &ExperimentConfig, data: &PreparedData, run: &VariantRun) -> SummaryRow {
    let ages = &data.test.ages;
    let young = mean_aleatoric_in(&run.predictions, ages, 13.0, 17.0);
    let old = mean_aleatoric_in(&run.predictions, ages, 20.0, 24.0);
    SummaryRow {
        suite: suite.name().into(),
        variant: run.variant.name().into(),
        seed: cfg.seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        mae: run.report.mae,
        mae_std: run.report.mae_std,
        coverage_z1: run.report.coverage_z1,
        coverage_z2: run.report.coverage_z2,
        mean_epistemic_var: run.report.mean_epistemic_var,
        mean_aleatoric_var: run.report.mean_aleatoric_var,
        aleatoric_13_17: young,
        aleatoric_20_24: old,
        aleatoric_ratio: young.zip(old).map(|(y, o)| o / y),
    }
}
