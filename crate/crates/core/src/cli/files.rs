//! File plumbing: atomic writes, hashing, dataset and prediction files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::UncertaintyReport;
use crate::models::Variant;
use crate::synthdata::{read_dataset, read_image_container, write_dataset, write_image_container, DataMode, SynthDataset};

/// Writes `path` through a temporary file in the same directory followed by
/// a rename, so the final path either holds the complete file or nothing.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Sibling image container of a dataset CSV: `name.csv` → `name.images.bin`.
pub fn image_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.images.bin"))
}

/// Writes `dir/name.csv` and, for image data, `dir/name.images.bin`.
/// Returns the written paths.
pub fn write_dataset_files(dir: &Path, name: &str, ds: &SynthDataset) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{name}.csv"));
    write_atomic(&csv, |w| write_dataset(w, ds))?;
    let mut out = vec![csv.clone()];
    if ds.mode == DataMode::Image {
        let bin = image_path(&csv);
        write_atomic(&bin, |w| write_image_container(w, &ds.features))?;
        out.push(bin);
    }
    Ok(out)
}

pub fn read_dataset_file(csv: &Path) -> Result<SynthDataset> {
    let bin = image_path(csv);
    let images = if bin.exists() {
        Some(read_image_container(BufReader::new(File::open(&bin)?))?)
    } else {
        None
    };
    read_dataset(BufReader::new(File::open(csv)?), images)
}

/// One line of `predictions.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: usize,
    pub true_age: f64,
    pub mu_hat: f64,
    pub epistemic_var: f64,
    pub aleatoric_var: f64,
    pub total_var: f64,
}

/// Sidecar `predictions.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub variant: Variant,
    pub passes: usize,
    pub seed: u64,
    pub aleatoric_learned: bool,
}

pub fn meta_path(predictions: &Path) -> PathBuf {
    predictions.with_extension("meta.json")
}

pub fn write_predictions(path: &Path, reports: &[UncertaintyReport], ages: &[f64], meta: &PredictionMeta) -> Result<()> {
    if reports.len() != ages.len() {
        return Err(Error::dim("write_predictions", "report and target counts differ"));
    }
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        for (i, (r, &y)) in reports.iter().zip(ages).enumerate() {
            c.serialize(PredictionRow {
                sample_id: i,
                true_age: y,
                mu_hat: r.mu_hat,
                epistemic_var: r.epistemic_var,
                aleatoric_var: r.aleatoric_var,
                total_var: r.total_var,
            })?;
        }
        c.flush()?;
        Ok(())
    })?;
    write_json(&meta_path(path), meta)
}

/// Reads predictions back into reports plus their `true_age` column.
pub fn read_predictions(path: &Path) -> Result<(Vec<UncertaintyReport>, Vec<f64>, Option<PredictionMeta>)> {
    let meta_file = meta_path(path);
    let meta: Option<PredictionMeta> = if meta_file.exists() { Some(read_json(&meta_file)?) } else { None };
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut reports = Vec::new();
    let mut ages = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row?;
        if row.sample_id != i {
            return Err(Error::Format(format!("prediction row {i} has sample_id {}", row.sample_id)));
        }
        reports.push(UncertaintyReport {
            mu_hat: row.mu_hat,
            epistemic_var: row.epistemic_var,
            aleatoric_var: row.aleatoric_var,
            total_var: row.total_var,
            aleatoric_learned: meta.as_ref().is_none_or(|m| m.aleatoric_learned),
            passes: meta.as_ref().map_or(0, |m| m.passes),
        });
        ages.push(row.true_age);
    }
    Ok((reports, ages, meta))
}
