//! Dataset serialization.
//!
//! Tabular part: CSV with columns
//! `sample_id, age, feature_wrist, feature_clavicle, maturity_wrist, maturity_clavicle, noise_std`.
//! Columns of channels absent from the dataset are left empty, and in image
//! mode both feature columns are empty.
//!
//! Image part: a binary container
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 8            | magic `BSCIMG01`                |
//! | 4            | rank `r` (u32, little endian)   |
//! | 8 · r        | extents (u64, little endian)    |
//! | 8 · Π extents| values (f64, little endian, row-major) |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Channel, DataMode, SampleTruth, SynthDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 8] = b"BSCIMG01";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    sample_id: usize,
    age: f64,
    feature_wrist: Option<f64>,
    feature_clavicle: Option<f64>,
    maturity_wrist: Option<f64>,
    maturity_clavicle: Option<f64>,
    noise_std: f64,
}

pub fn write_dataset<W: Write>(out: W, ds: &SynthDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let pos = |c: Channel| ds.channels.iter().position(|&x| x == c);
    let (pw, pc) = (pos(Channel::Wrist), pos(Channel::Clavicle));
    for i in 0..ds.len() {
        let t = &ds.truth[i];
        w.serialize(Row {
            sample_id: i,
            age: ds.ages[i],
            feature_wrist: ds.feature(i, Channel::Wrist),
            feature_clavicle: ds.feature(i, Channel::Clavicle),
            maturity_wrist: pw.map(|j| t.maturity[j]),
            maturity_clavicle: pc.map(|j| t.maturity[j]),
            noise_std: t.noise_std,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV. `images` must be given exactly for image-mode data.
pub fn read_dataset<R: Read>(input: R, images: Option<Tensor>) -> Result<SynthDataset> {
    let mut rdr = csv::Reader::from_reader(input);
    let rows = rdr.deserialize::<Row>().collect::<std::result::Result<Vec<_>, _>>()?;
    let first = rows.first().ok_or_else(|| Error::Format("dataset has no rows".into()))?;
    let mut channels = Vec::new();
    if first.maturity_wrist.is_some() {
        channels.push(Channel::Wrist);
    }
    if first.maturity_clavicle.is_some() {
        channels.push(Channel::Clavicle);
    }
    if channels.is_empty() {
        return Err(Error::Format("dataset has no channel columns".into()));
    }
    let mode = if images.is_some() { DataMode::Image } else { DataMode::Vector };
    let mut ages = Vec::with_capacity(rows.len());
    let mut truth = Vec::with_capacity(rows.len());
    let mut feats = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if r.sample_id != i {
            return Err(Error::Format(format!("row {i} has sample_id {}", r.sample_id)));
        }
        let mut mats = Vec::with_capacity(channels.len());
        for &c in &channels {
            let (f, m) = match c {
                Channel::Wrist => (r.feature_wrist, r.maturity_wrist),
                Channel::Clavicle => (r.feature_clavicle, r.maturity_clavicle),
            };
            let m = m.ok_or_else(|| Error::Format(format!("row {i}: missing maturity for {c:?}")))?;
            mats.push(m);
            if mode == DataMode::Vector {
                feats.push(f.ok_or_else(|| Error::Format(format!("row {i}: missing feature for {c:?}")))?);
            }
        }
        ages.push(r.age);
        truth.push(SampleTruth {
            maturity: mats,
            noise_std: r.noise_std,
        });
    }
    let features = match images {
        Some(img) => {
            if img.rank() != 4 || img.shape()[0] != rows.len() {
                return Err(Error::Format(format!(
                    "image container shape {:?} does not match {} rows",
                    img.shape(),
                    rows.len()
                )));
            }
            img
        }
        None => Tensor::new(vec![rows.len(), channels.len()], feats)?,
    };
    Ok(SynthDataset {
        channels,
        mode,
        ages,
        features,
        truth,
    })
}

pub fn write_image_container<W: Write>(mut out: W, t: &Tensor) -> Result<()> {
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_image_container<R: Read>(mut input: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::Format("bad image container magic".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("image extents overflow".into()))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 8 {
        return Err(Error::Format(format!("expected {} value bytes, found {}", numel * 8, bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}
