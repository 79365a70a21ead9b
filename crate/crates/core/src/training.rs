//! Adam and the minibatch training loop.
//!
//! Each step draws exactly one weight sample for the whole minibatch.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::models::{Batch, Model, ModelSpec, Standardizer};

/// How the KL term is weighted against each minibatch likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum KlWeighting {
    /// `1 / M` with `M` minibatches per epoch, so one epoch sees the full KL once.
    Uniform,
    Fixed { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub kl_weighting: KlWeighting,
    /// Weight realization during training; `Mean` freezes the noise at zero.
    pub noise: Mode,
    /// Log progress every this many epochs; 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            kl_weighting: KlWeighting::Uniform,
            noise: Mode::Sample,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let KlWeighting::Fixed { weight } = self.kl_weighting {
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::Config(format!("fixed kl weight {weight} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!("param {}, grad {}, state {}", param.len(), grad.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss.
    pub loss: f64,
    /// Mean minibatch likelihood term.
    pub nll: f64,
    /// Mean unweighted KL term (0 for deterministic variants).
    pub kl: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Equality of everything except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.len() == other.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.nll.to_bits() == b.nll.to_bits()
                    && a.kl.to_bits() == b.kl.to_bits()
            })
    }

    /// CSV with columns `epoch,loss,nll,kl,seconds`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn diverged(epoch: usize, batch: usize, reason: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        batch,
        reason: reason.into(),
    }
}

/// Minimizes the model's loss with Adam.
///
/// Minibatch order is reshuffled every epoch from a stream seeded by
/// `config.seed`; the same stream supplies the weight noise, so the result
/// is a deterministic function of `(model, data, config)`.
pub fn train(mut model: Model, data: &Batch, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = config.adam();
    let mut states: Vec<AdamState> = model
        .named_params()
        .iter()
        .map(|(_, t)| AdamState::new(t.numel()))
        .collect();
    let n = data.len();
    let batches = n.div_ceil(config.batch_size);
    let kl_weight = match config.kl_weighting {
        KlWeighting::Uniform => 1.0 / batches as f64,
        KlWeighting::Fixed { weight } => weight,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nll_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = data.select(rows)?;
            let mut g = Graph::new();
            let pass = match model.loss(&mut g, &batch, config.noise, kl_weight, &mut rng) {
                Ok(p) => p,
                Err(e @ (Error::NonFinite { .. } | Error::NumericDomain { .. })) => {
                    return Err(diverged(epoch, b, e.to_string()))
                }
                Err(e) => return Err(e),
            };
            let loss = g.value(pass.loss).item()?;
            if !loss.is_finite() {
                return Err(diverged(epoch, b, format!("loss is {loss}")));
            }
            g.backward(pass.loss)?;
            for ((param, state), var) in model.params_mut().into_iter().zip(&mut states).zip(&pass.params) {
                let grad = g.grad(*var);
                adam_step(param.data_mut(), grad.data(), state, &adam)?;
                if !param.is_finite() {
                    return Err(diverged(epoch, b, "non-finite parameter after update"));
                }
            }
            loss_sum += loss;
            nll_sum += g.value(pass.nll).item()?;
            if let Some(kl) = pass.kl {
                kl_sum += g.value(kl).item()?;
            }
        }
        let m = batches as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / m,
            nll: nll_sum / m,
            kl: kl_sum / m,
            seconds: start.elapsed().as_secs_f64(),
        };
        if config.log_every > 0 && (epoch + 1) % config.log_every == 0 {
            log::info!(
                "{} epoch {}: loss {:.4} nll {:.4} kl {:.2}",
                model.variant(),
                epoch + 1,
                stats.loss,
                stats.nll,
                stats.kl
            );
        }
        log.epochs.push(stats);
    }
    Ok((model, log))
}

/// Builds a model from `spec`, fits its standardizer on `data` and trains it.
pub fn fit(spec: ModelSpec, data: &Batch, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut model = Model::build(spec)?;
    model.set_standardizer(Standardizer::fit(data));
    train(model, data, config)
}
