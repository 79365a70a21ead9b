//! Error, calibration and uncertainty-profile metrics over prediction reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::UncertaintyReport;

fn check_lengths(preds: &[UncertaintyReport], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::dim(
            "evaluation",
            format!("{} predictions vs {} targets", preds.len(), targets.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    Ok(())
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and population standard deviation of `|μ̂ − y|`.
pub fn mae(preds: &[UncertaintyReport], targets: &[f64]) -> Result<(f64, f64)> {
    check_lengths(preds, targets)?;
    let errs: Vec<f64> = preds.iter().zip(targets).map(|(p, y)| (p.mu_hat - y).abs()).collect();
    let mean = sorted_mean(errs.clone());
    let var = sorted_mean(errs.iter().map(|e| (e - mean).powi(2)).collect());
    Ok((mean, var.sqrt()))
}

/// Fraction of samples with `|y − μ̂| ≤ z·√(total variance)`.
pub fn coverage(preds: &[UncertaintyReport], targets: &[f64], z: f64) -> Result<f64> {
    if z.is_nan() || z <= 0.0 {
        return Err(Error::Config(format!("coverage needs z > 0, got {z}")));
    }
    check_lengths(preds, targets)?;
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, &y)| (y - p.mu_hat).abs() <= z * p.total_var.sqrt())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    /// Inclusive lower edge of the bin.
    pub age_low: f64,
    pub age_high: f64,
    pub count: usize,
    pub mean_epistemic_var: f64,
    pub mean_aleatoric_var: f64,
}

/// Mean epistemic and aleatoric variance per `floor(age / bin_width)` bin,
/// in ascending age order. Empty bins are omitted.
pub fn uncertainty_profile(preds: &[UncertaintyReport], targets: &[f64], bin_width: f64) -> Result<Vec<ProfileBin>> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    check_lengths(preds, targets)?;
    let mut bins: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (p, &y) in preds.iter().zip(targets) {
        let e = bins.entry((y / bin_width).floor() as i64).or_default();
        e.0.push(p.epistemic_var);
        e.1.push(p.aleatoric_var);
    }
    Ok(bins
        .into_iter()
        .map(|(k, (ep, al))| ProfileBin {
            age_low: k as f64 * bin_width,
            age_high: (k + 1) as f64 * bin_width,
            count: ep.len(),
            mean_epistemic_var: sorted_mean(ep),
            mean_aleatoric_var: sorted_mean(al),
        })
        .collect())
}

/// Mean aleatoric variance over samples with target in `[lo, hi)`.
pub fn mean_aleatoric_in(preds: &[UncertaintyReport], targets: &[f64], lo: f64, hi: f64) -> Option<f64> {
    mean_in(preds, targets, lo, hi, |p| p.aleatoric_var)
}

/// Mean epistemic variance over samples with target in `[lo, hi)`.
pub fn mean_epistemic_in(preds: &[UncertaintyReport], targets: &[f64], lo: f64, hi: f64) -> Option<f64> {
    mean_in(preds, targets, lo, hi, |p| p.epistemic_var)
}

fn mean_in(
    preds: &[UncertaintyReport],
    targets: &[f64],
    lo: f64,
    hi: f64,
    f: impl Fn(&UncertaintyReport) -> f64,
) -> Option<f64> {
    let v: Vec<f64> = preds
        .iter()
        .zip(targets)
        .filter(|(_, &y)| y >= lo && y < hi)
        .map(|(p, _)| f(p))
        .collect();
    (!v.is_empty()).then(|| sorted_mean(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub true_age: f64,
    pub mu_hat: f64,
    pub epistemic_std: f64,
    pub aleatoric_std: f64,
}

pub fn scatter_data(preds: &[UncertaintyReport], targets: &[f64]) -> Result<Vec<ScatterRow>> {
    check_lengths(preds, targets)?;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, &y)| ScatterRow {
            true_age: y,
            mu_hat: p.mu_hat,
            epistemic_std: p.epistemic_var.sqrt(),
            aleatoric_std: p.aleatoric_var.sqrt(),
        })
        .collect())
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub n: usize,
    pub mae: f64,
    pub mae_std: f64,
    pub coverage_z1: f64,
    pub coverage_z2: f64,
    pub mean_epistemic_var: f64,
    pub mean_aleatoric_var: f64,
    pub profile: Vec<ProfileBin>,
}

pub fn evaluate(variant: &str, preds: &[UncertaintyReport], targets: &[f64]) -> Result<EvalReport> {
    let (mae, mae_std) = mae(preds, targets)?;
    Ok(EvalReport {
        variant: variant.to_string(),
        n: preds.len(),
        mae,
        mae_std,
        coverage_z1: coverage(preds, targets, 1.0)?,
        coverage_z2: coverage(preds, targets, 2.0)?,
        mean_epistemic_var: sorted_mean(preds.iter().map(|p| p.epistemic_var).collect()),
        mean_aleatoric_var: sorted_mean(preds.iter().map(|p| p.aleatoric_var).collect()),
        profile: uncertainty_profile(preds, targets, 1.0)?,
    })
}
