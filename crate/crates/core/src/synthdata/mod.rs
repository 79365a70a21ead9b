//! Synthetic age-regression cohorts.
//!
//! Each subject has a chronological age drawn uniformly from the age range
//! and one "maturity" feature per anatomical channel. Maturity tracks age
//! until the channel's saturation age and then plateaus, so past saturation
//! the feature carries almost no information about age. Feature noise is
//! homoscedastic, which turns into heteroscedastic uncertainty in age.

mod io;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::models::Batch;
use crate::tensor::Tensor;

pub use io::{read_dataset, read_image_container, write_dataset, write_image_container, IMAGE_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Wrist,
    Clavicle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Vector,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub age_range: [f64; 2],
    pub channels: Vec<Channel>,
    pub wrist_sat: f64,
    pub clavicle_sat: f64,
    pub steepness: f64,
    pub feature_noise_std: f64,
    pub mode: DataMode,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 328,
            age_range: [13.0, 25.0],
            channels: vec![Channel::Wrist, Channel::Clavicle],
            wrist_sat: 18.0,
            clavicle_sat: 24.0,
            steepness: 1.5,
            feature_noise_std: 0.05,
            mode: DataMode::Vector,
            image_size: 16,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.age_range;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("age_range [{lo}, {hi}] must satisfy low < high"));
        }
        for (name, sat) in [("wrist_sat", self.wrist_sat), ("clavicle_sat", self.clavicle_sat)] {
            if !(sat > lo && sat < hi) {
                return bad(format!("{name} {sat} outside age range [{lo}, {hi}]"));
            }
        }
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return bad(format!("steepness must be positive, got {}", self.steepness));
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return bad(format!("feature_noise_std must be ≥ 0, got {}", self.feature_noise_std));
        }
        if self.channels.is_empty() {
            return bad("at least one channel is required".into());
        }
        let mut sorted = self.channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.channels.len() {
            return bad("duplicate channel".into());
        }
        if self.mode == DataMode::Image && self.image_size < 10 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        Ok(())
    }

    pub fn saturation(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Wrist => self.wrist_sat,
            Channel::Clavicle => self.clavicle_sat,
        }
    }
}

/// Soft-saturating maturity curve `a − softplus(k·(a − sat)) / k`.
///
/// Slope `1 − sigmoid(k·(a − sat))`: close to 1 well below `sat`, close to 0
/// well above it, where the curve flattens out at `sat`.
pub fn maturity(age: f64, sat: f64, k: f64) -> f64 {
    age - softplus(k * (age - sat)) / k
}

/// Noise-free generative quantities of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    /// One value per dataset channel, in channel order.
    pub maturity: Vec<f64>,
    /// Standard deviation of the additive feature noise.
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub channels: Vec<Channel>,
    pub mode: DataMode,
    pub ages: Vec<f64>,
    /// `[n × channels]` in vector mode, `[n × size × size × 1]` in image mode.
    pub features: Tensor,
    pub truth: Vec<SampleTruth>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.ages.clone())
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty dataset subset".into()));
        }
        Ok(Self {
            channels: self.channels.clone(),
            mode: self.mode,
            ages: rows.iter().map(|&r| self.ages[r]).collect(),
            features: self.features.select_rows(rows)?,
            truth: rows.iter().map(|&r| self.truth[r].clone()).collect(),
        })
    }

    /// Column of channel `c` in vector mode.
    pub fn feature(&self, row: usize, channel: Channel) -> Option<f64> {
        let j = self.channels.iter().position(|&c| c == channel)?;
        (self.mode == DataMode::Vector).then(|| self.features.data()[row * self.channels.len() + j])
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [lo, hi] = config.age_range;
    let c = config.channels.len();
    let mut ages = Vec::with_capacity(config.n);
    let mut truth = Vec::with_capacity(config.n);
    let mut features = Vec::with_capacity(config.n * c);
    for _ in 0..config.n {
        let age = rng.random_range(lo..hi);
        let mats: Vec<f64> = config
            .channels
            .iter()
            .map(|&ch| maturity(age, config.saturation(ch), config.steepness))
            .collect();
        if config.mode == DataMode::Vector {
            for &m in &mats {
                let e: f64 = rng.sample(StandardNormal);
                features.push(m + config.feature_noise_std * e);
            }
        }
        ages.push(age);
        truth.push(SampleTruth {
            maturity: mats,
            noise_std: config.feature_noise_std,
        });
    }
    let features = match config.mode {
        DataMode::Vector => Tensor::new(vec![config.n, c], features)?,
        DataMode::Image => {
            let s = config.image_size;
            let mut pixels = Vec::with_capacity(config.n * s * s);
            for t in &truth {
                pixels.extend(render(config, &t.maturity, &mut rng));
            }
            Tensor::new(vec![config.n, s, s, 1], pixels)?
        }
    };
    Ok(SynthDataset {
        channels: config.channels.clone(),
        mode: config.mode,
        ages,
        features,
        truth,
    })
}

/// Renders one `size × size` image: a disk whose radius grows with wrist
/// maturity and a bar along the bottom whose length grows with clavicle
/// maturity. Edges are anti-aliased so intensities vary continuously.
fn render(config: &GeneratorConfig, mats: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = config.image_size;
    let lo = config.age_range[0];
    let mut img = vec![0.0; s * s];
    for (&ch, &m) in config.channels.iter().zip(mats) {
        let u = ((m - lo) / (config.saturation(ch) - lo)).clamp(0.0, 1.0);
        match ch {
            Channel::Wrist => {
                let (cy, cx) = ((s as f64 - 3.0) / 2.0, (s as f64 - 1.0) / 2.0);
                let r_max = (s as f64 - 3.0) / 2.0 - 0.5;
                let r = 0.5 + (r_max - 0.5) * u;
                for y in 0..s - 2 {
                    for x in 0..s {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        img[y * s + x] += (r - d + 0.5).clamp(0.0, 1.0);
                    }
                }
            }
            Channel::Clavicle => {
                let len = (s - 2) as f64 * u;
                for j in 0..s - 2 {
                    img[(s - 2) * s + 1 + j] += (len - j as f64).clamp(0.0, 1.0);
                }
            }
        }
    }
    let pixel_noise = config.feature_noise_std / (config.age_range[1] - lo);
    for p in &mut img {
        let e: f64 = rng.sample(StandardNormal);
        *p += pixel_noise * e;
    }
    img
}

/// Index partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split over 1-year age bins.
///
/// Each bin is shuffled with the seeded stream and `round(train_frac · count)`
/// of its samples go to train. Bins with fewer than 2 samples go entirely to
/// train. Both index lists are returned sorted.
pub fn split(ages: &[f64], age_low: f64, train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &a) in ages.iter().enumerate() {
        bins.entry((a - age_low).floor() as i64).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in bins.values_mut() {
        if members.len() < 2 {
            train.extend_from_slice(members);
            continue;
        }
        members.shuffle(&mut rng);
        let k = (train_frac * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// A 1-D regression task with known heteroscedastic noise.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroTask {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Mean function of [`hetero_task`].
pub fn hetero_mean(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

/// Noise standard deviation of [`hetero_task`]: ramps linearly 0.1 → 1.0 over `[0, 1]`.
pub fn hetero_sigma(x: f64) -> f64 {
    0.1 + 0.9 * x
}

/// `x ~ U(0, 1)`, `y = sin(2πx) + N(0, σ(x)²)`.
pub fn hetero_task(n: usize, seed: u64) -> HeteroTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = x
        .iter()
        .map(|&x| {
            let e: f64 = rng.sample(StandardNormal);
            hetero_mean(x) + hetero_sigma(x) * e
        })
        .collect();
    HeteroTask { x, y }
}

impl HeteroTask {
    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(Tensor::new(vec![self.x.len(), 1], self.x.clone())?, self.y.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maturity_reference_points() {
        let (sat, k) = (18.0, 1.5);
        assert!((maturity(sat - 10.0, sat, k) - (sat - 10.0)).abs() < 1e-4);
        assert!((maturity(sat, sat, k) - (sat - 2f64.ln() / k)).abs() < 1e-12);
        assert!((maturity(sat + 10.0, sat, k) - sat).abs() < 1e-4);
    }

    #[test]
    fn maturity_is_monotone_and_plateaus() {
        let sat = 18.0;
        for k in [1.0, 1.5, 2.5, 4.0] {
            let grid: Vec<f64> = (0..=1200).map(|i| 13.0 + i as f64 * 0.01).collect();
            for w in grid.windows(2) {
                assert!(maturity(w[1], sat, k) >= maturity(w[0], sat, k));
            }
            // Past sat + 3/k the curve is within ln(1 + e⁻³)/k of its asymptote.
            let bound = (-3f64).exp().ln_1p() / k;
            let start = sat + 3.0 / k;
            let plateau: Vec<f64> = grid.iter().copied().filter(|&a| a > start).collect();
            for &a in &plateau {
                for &b in &plateau {
                    let d = (maturity(a, sat, k) - maturity(b, sat, k)).abs();
                    assert!(d < bound);
                    if k >= 2.5 {
                        assert!(d < 0.02);
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_features_equal_maturity() {
        let cfg = GeneratorConfig {
            feature_noise_std: 0.0,
            ..GeneratorConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.len(), 328);
        for i in 0..d.len() {
            assert_eq!(d.feature(i, Channel::Wrist).unwrap(), d.truth[i].maturity[0]);
            assert_eq!(d.feature(i, Channel::Clavicle).unwrap(), d.truth[i].maturity[1]);
            assert!((13.0..25.0).contains(&d.ages[i]));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = GeneratorConfig {
            seed: 5,
            ..GeneratorConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GeneratorConfig {
            seed: 6,
            ..GeneratorConfig::default()
        };
        assert_ne!(generate(&cfg).unwrap().ages, generate(&other).unwrap().ages);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = GeneratorConfig {
            age_range: [25.0, 13.0],
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        cfg.age_range = [13.0, 25.0];
        cfg.wrist_sat = 30.0;
        assert!(cfg.validate().is_err());
        cfg.wrist_sat = 18.0;
        cfg.n = 1;
        assert!(cfg.validate().is_err());
        cfg.n = 10;
        cfg.channels = vec![Channel::Wrist, Channel::Wrist];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_mode_encodes_maturity() {
        let cfg = GeneratorConfig {
            mode: DataMode::Image,
            n: 40,
            feature_noise_std: 0.0,
            ..GeneratorConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.features.shape(), &[40, 16, 16, 1]);
        // Disk mass grows with wrist maturity.
        let mass = |i: usize| d.features.data()[i * 256..i * 256 + 14 * 16].iter().sum::<f64>();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| d.truth[a].maturity[0].total_cmp(&d.truth[b].maturity[0]));
        for w in order.windows(2) {
            assert!(mass(w[1]) >= mass(w[0]) - 1e-9);
        }
        // Bar length tracks clavicle maturity.
        let bar = |i: usize| d.features.data()[i * 256 + 14 * 16..i * 256 + 15 * 16].iter().sum::<f64>();
        let young = order[0];
        let old = *order.last().unwrap();
        assert!(bar(old) > bar(young));
    }

    #[test]
    fn split_exact_per_bin_counts() {
        let ages: Vec<f64> = (0..12).flat_map(|b| (0..10).map(move |i| 13.0 + b as f64 + i as f64 * 0.09)).collect();
        let s = split(&ages, 13.0, 0.7, 3).unwrap();
        let mut per_bin = BTreeMap::new();
        for &i in &s.train {
            *per_bin.entry((ages[i] - 13.0).floor() as i64).or_insert(0) += 1;
        }
        assert!(per_bin.values().all(|&c| c == 7));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ages.len()).collect::<Vec<_>>());
        assert!(split(&ages, 13.0, 1.0, 0).is_err());
    }

    #[test]
    fn singleton_bins_go_to_train() {
        let ages = vec![13.5, 14.2, 14.4, 20.1];
        let s = split(&ages, 13.0, 0.5, 0).unwrap();
        assert!(s.train.contains(&0));
        assert!(s.train.contains(&3));
        assert_eq!(s.test.len(), 1);
    }

    #[test]
    fn hetero_task_noise_matches_sigma() {
        let t = hetero_task(50_000, 1);
        let resid: Vec<(f64, f64)> = t.x.iter().zip(&t.y).map(|(&x, &y)| (x, y - hetero_mean(x))).collect();
        let high: Vec<f64> = resid.iter().filter(|(x, _)| *x > 0.9).map(|(_, r)| r * r).collect();
        let var = high.iter().sum::<f64>() / high.len() as f64;
        assert!((var.sqrt() - hetero_sigma(0.95)).abs() < 0.05);
    }
}
