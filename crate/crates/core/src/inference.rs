//! Multi-pass predictive inference and the epistemic / aleatoric split.
//!
//! For `T` sampled forward passes with outputs `(μ_t, σ²_t)`:
//!
//! * `μ̂ = (1/T) Σ μ_t`
//! * aleatoric `= (1/T) Σ σ²_t`
//! * epistemic `= (1/T) Σ (μ_t − μ̂)²` (population variance)

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::models::{Model, FIXED_LOG_VAR};
use crate::par::{try_map_indexed, Parallelism};
use crate::tensor::Tensor;

pub const DEFAULT_PASSES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub mu_hat: f64,
    pub epistemic_var: f64,
    pub aleatoric_var: f64,
    /// Always `epistemic_var + aleatoric_var`.
    pub total_var: f64,
    /// False for point-head variants, whose aleatoric variance is the fixed training value.
    pub aleatoric_learned: bool,
    pub passes: usize,
}

/// Sum that does not depend on the order of `values`.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

impl UncertaintyReport {
    /// Aggregates per-pass means and (optionally) per-pass variances.
    /// Invariant under any permutation of the passes.
    pub fn from_passes(mus: &[f64], variances: Option<&[f64]>) -> Result<Self> {
        if mus.is_empty() {
            return Err(Error::Config("at least one forward pass is required".into()));
        }
        let t = mus.len() as f64;
        let mut buf = mus.to_vec();
        let mu_hat = ordered_sum(&mut buf) / t;
        let mut dev: Vec<f64> = mus.iter().map(|m| (m - mu_hat).powi(2)).collect();
        let epistemic_var = ordered_sum(&mut dev) / t;
        let (aleatoric_var, aleatoric_learned) = match variances {
            Some(v) => {
                if v.len() != mus.len() {
                    return Err(Error::dim("uncertainty report", "pass count mismatch"));
                }
                let mut v = v.to_vec();
                (ordered_sum(&mut v) / t, true)
            }
            None => (FIXED_LOG_VAR.exp(), false),
        };
        Ok(Self {
            mu_hat,
            epistemic_var,
            aleatoric_var,
            total_var: epistemic_var + aleatoric_var,
            aleatoric_learned,
            passes: mus.len(),
        })
    }
}

fn as_batch_of_one(x: &Tensor) -> Result<Tensor> {
    let mut shape = Vec::with_capacity(x.rank() + 1);
    shape.push(1);
    shape.extend_from_slice(x.shape());
    x.reshape(shape)
}

/// Runs `passes` sampled forward passes on one input (given without a batch axis).
///
/// Deterministic variants need only one pass; their epistemic variance is exactly 0.
pub fn predict(model: &Model, x: &Tensor, passes: usize, rng: &mut dyn RngCore) -> Result<UncertaintyReport> {
    if passes < 1 {
        return Err(Error::Config("passes must be at least 1".into()));
    }
    let x = as_batch_of_one(x)?;
    let runs = if model.variant().is_bayesian() { passes } else { 1 };
    let mut mus = Vec::with_capacity(runs);
    let mut vars = Vec::with_capacity(runs);
    for _ in 0..runs {
        let p = model.predict(&x, Mode::Sample, rng)?[0];
        mus.push(p.mu);
        if let Some(lv) = p.log_var {
            vars.push(lv.exp());
        }
    }
    let learned = model.variant().has_sigma().then_some(vars.as_slice());
    let mut report = UncertaintyReport::from_passes(&mus, learned)?;
    report.passes = passes;
    Ok(report)
}

/// Noise stream for sample `index` derived from `base_seed`.
pub fn sample_rng(base_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng
}

/// [`predict`] over many inputs. Sample `i` always draws from
/// [`sample_rng`]`(base_seed, i)`, so results do not depend on `par`.
pub fn predict_batch(
    model: &Model,
    inputs: &[Tensor],
    passes: usize,
    base_seed: u64,
    par: Parallelism,
) -> Result<Vec<UncertaintyReport>> {
    if passes < 1 {
        return Err(Error::Config("passes must be at least 1".into()));
    }
    try_map_indexed(inputs.len(), par, |i| {
        predict(model, &inputs[i], passes, &mut sample_rng(base_seed, i))
    })
}

/// Splits a batch tensor into per-sample tensors without the batch axis.
pub fn split_samples(x: &Tensor) -> Result<Vec<Tensor>> {
    let (&n, rest) = x
        .shape()
        .split_first()
        .ok_or_else(|| Error::dim("split_samples", "scalar input"))?;
    let stride = x.numel() / n;
    let shape = if rest.is_empty() { vec![1] } else { rest.to_vec() };
    x.data()
        .chunks(stride)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()))
        .collect()
}
