//! The four model variants: {deterministic, Bayesian} × {point head, Gaussian head}.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, Conv2dLayer, DenseLayer, Layer, LayerPass, Mode, VariationalConv2dLayer,
    VariationalDenseLayer,
};
use crate::probability::{elbo_loss, gaussian_nll_sum, GaussianParams, PriorSpec, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::tensor::Tensor;

/// Log-variance used by the point-head Bayesian variant: σ = 1 year.
pub const FIXED_LOG_VAR: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cnn,
    CnnSigma,
    Bcnn,
    BcnnSigma,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cnn, Variant::CnnSigma, Variant::Bcnn, Variant::BcnnSigma];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::CnnSigma => "cnn_sigma",
            Variant::Bcnn => "bcnn",
            Variant::BcnnSigma => "bcnn_sigma",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Variant::Bcnn | Variant::BcnnSigma)
    }

    pub fn has_sigma(self) -> bool {
        matches!(self, Variant::CnnSigma | Variant::BcnnSigma)
    }

    pub fn head_outputs(self) -> usize {
        if self.has_sigma() {
            2
        } else {
            1
        }
    }

    /// The deterministic variant with the same head.
    pub fn deterministic(self) -> Variant {
        match self {
            Variant::Bcnn => Variant::Cnn,
            Variant::BcnnSigma => Variant::CnnSigma,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    Vector { dim: usize },
    Image { size: usize, channels: usize },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input: InputKind,
    /// Hidden widths of the vector pathway; the image pathway uses a fixed plan.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn vector(variant: Variant, dim: usize, seed: u64) -> Self {
        Self {
            variant,
            input: InputKind::Vector { dim },
            hidden: default_hidden(),
            prior: PriorSpec::default(),
            seed,
        }
    }

    pub fn image(variant: Variant, size: usize, channels: usize, seed: u64) -> Self {
        Self {
            variant,
            input: InputKind::Image { size, channels },
            hidden: Vec::new(),
            prior: PriorSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        match self.input {
            InputKind::Vector { dim: 0 } => Err(Error::Config("vector input needs dim ≥ 1".into())),
            InputKind::Vector { .. } if self.hidden.contains(&0) => {
                Err(Error::Config("hidden layer widths must be positive".into()))
            }
            InputKind::Image { channels: 0, .. } => {
                Err(Error::Config("image input needs at least one channel".into()))
            }
            InputKind::Image { size, .. } if size < 10 => Err(Error::Config(format!(
                "image size {size} too small for the conv plan (needs ≥ 10)"
            ))),
            _ => Ok(()),
        }
    }
}

/// Affine standardization of inputs and targets baked into a model.
///
/// Inputs are mapped to `(x − mean) / scale` before the first layer and
/// head outputs are mapped back to target units, so predictions are always
/// in the units of the training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            x_mean: Vec::new(),
            x_scale: Vec::new(),
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let sd = (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    /// Per-feature standardization for `[n × d]` inputs plus target standardization.
    /// Image inputs only get the target part.
    pub fn fit(batch: &Batch) -> Self {
        let (y_mean, y_scale) = mean_and_scale(batch.y.iter().copied());
        let (x_mean, x_scale) = match batch.x.shape() {
            [n, d] => (0..*d)
                .map(|j| mean_and_scale((0..*n).map(move |i| batch.x.data()[i * d + j])))
                .unzip(),
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    fn apply_inputs(&self, x: &Tensor) -> Result<Tensor> {
        if self.x_mean.is_empty() {
            return Ok(x.clone());
        }
        let d = self.x_mean.len();
        if x.shape().last() != Some(&d) {
            return Err(Error::dim("standardize", format!("input {:?} vs {d} features", x.shape())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.x_mean[i % d]) / self.x_scale[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Paired inputs (leading axis = samples) and scalar targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<f64>) -> Result<Self> {
        if x.shape().first() != Some(&y.len()) {
            return Err(Error::dim(
                "batch",
                format!("inputs {:?} with {} targets", x.shape(), y.len()),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(rows)?,
            y: rows.iter().map(|&r| self.y[r]).collect(),
        })
    }
}

/// One network output in target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    /// Present only for variants with a Gaussian head; within `[−10, 10]`.
    pub log_var: Option<f64>,
}

impl GaussianPrediction {
    pub fn params(&self) -> Result<GaussianParams> {
        self.log_var
            .map(|lv| GaussianParams::new(self.mu, lv))
            .ok_or(Error::NoVarianceHead("point-head"))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Dense(DenseLayer),
    VarDense(VariationalDenseLayer),
    Conv(Conv2dLayer),
    VarConv(VariationalConv2dLayer),
    Pool,
    Flatten,
}

impl Stage {
    fn layer(&self) -> Option<&dyn Layer> {
        match self {
            Stage::Dense(l) => Some(l),
            Stage::VarDense(l) => Some(l),
            Stage::Conv(l) => Some(l),
            Stage::VarConv(l) => Some(l),
            Stage::Pool | Stage::Flatten => None,
        }
    }

    fn layer_mut(&mut self) -> Option<&mut dyn Layer> {
        match self {
            Stage::Dense(l) => Some(l),
            Stage::VarDense(l) => Some(l),
            Stage::Conv(l) => Some(l),
            Stage::VarConv(l) => Some(l),
            Stage::Pool | Stage::Flatten => None,
        }
    }
}

/// Output of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[n]` predicted means in target units.
    pub mu: Var,
    /// `[n]` clamped log-variances, Gaussian-head variants only.
    pub log_var: Option<Var>,
    /// Summed KL of all variational layers, Bayesian variants only.
    pub kl: Option<Var>,
    /// Parameter leaves in [`Model::named_params`] order.
    pub params: Vec<Var>,
}

/// Output of [`Model::loss`].
#[derive(Clone, Debug)]
pub struct LossPass {
    pub loss: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    stages: Vec<Stage>,
    standardizer: Standardizer,
}

impl Model {
    /// Vector input: hidden dense layers (relu) then a linear head.
    /// Image input: conv 3×3×8 → pool → conv 3×3×16 → pool → flatten → dense 32 → head.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bayes = spec.variant.is_bayesian();
        let prior = spec.prior;
        let dense = |i: usize, o: usize, act: Activation, rng: &mut dyn RngCore| {
            if bayes {
                Stage::VarDense(VariationalDenseLayer::init(i, o, act, prior, rng))
            } else {
                Stage::Dense(DenseLayer::init(i, o, act, rng))
            }
        };
        let conv = |shape: [usize; 4], rng: &mut dyn RngCore| {
            if bayes {
                Stage::VarConv(VariationalConv2dLayer::init(shape, 1, Activation::Relu, prior, rng))
            } else {
                Stage::Conv(Conv2dLayer::init(shape, 1, Activation::Relu, rng))
            }
        };
        let head = spec.variant.head_outputs();
        let mut stages = Vec::new();
        match spec.input {
            InputKind::Vector { dim } => {
                let mut width = dim;
                for &h in &spec.hidden {
                    stages.push(dense(width, h, Activation::Relu, &mut rng));
                    width = h;
                }
                stages.push(dense(width, head, Activation::Identity, &mut rng));
            }
            InputKind::Image { size, channels } => {
                let side = ((size - 2) / 2 - 2) / 2;
                stages.push(conv([3, 3, channels, 8], &mut rng));
                stages.push(Stage::Pool);
                stages.push(conv([3, 3, 8, 16], &mut rng));
                stages.push(Stage::Pool);
                stages.push(Stage::Flatten);
                stages.push(dense(side * side * 16, 32, Activation::Relu, &mut rng));
                stages.push(dense(32, head, Activation::Identity, &mut rng));
            }
        }
        Ok(Self {
            spec,
            stages,
            standardizer: Standardizer::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, standardizer: Standardizer) {
        self.standardizer = standardizer;
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.layer().map(|l| (i, l)))
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(name, t)| (format!("layer{i}.{name}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages
            .iter_mut()
            .filter_map(Stage::layer_mut)
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deterministic network of the same shape whose weights are the posterior means.
    pub fn deterministic_from_means(&self) -> Model {
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                Stage::VarDense(l) => Stage::Dense(l.mean_layer()),
                Stage::VarConv(l) => Stage::Conv(l.mean_layer()),
                other => other.clone(),
            })
            .collect();
        let mut spec = self.spec.clone();
        spec.variant = spec.variant.deterministic();
        Model {
            spec,
            stages,
            standardizer: self.standardizer.clone(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match (self.spec.input, x.shape()) {
            (InputKind::Vector { dim }, [_, d]) => *d == dim,
            (InputKind::Image { size, channels }, [_, h, w, c]) => {
                *h == size && *w == size && *c == channels
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "model input",
                format!("{:?} does not fit {:?}", x.shape(), self.spec.input),
            ))
        }
    }

    /// Builds the forward graph for a batch `x` given in raw (unstandardized) units.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut h = g.constant(self.standardizer.apply_inputs(x)?);
        let mut kl: Option<Var> = None;
        let mut params = Vec::new();
        for stage in &self.stages {
            h = match stage {
                Stage::Pool => g.avg_pool2(h)?,
                Stage::Flatten => {
                    let shape = g.shape(h);
                    let rest = shape[1..].iter().product();
                    let n = shape[0];
                    g.reshape(h, vec![n, rest])?
                }
                s => {
                    let layer = s.layer().expect("parameterized stage");
                    let LayerPass {
                        output,
                        kl: layer_kl,
                        params: p,
                        ..
                    } = layer.forward(g, h, mode, rng)?;
                    params.extend(p);
                    if let Some(k) = layer_kl {
                        kl = Some(match kl {
                            Some(acc) => g.add(acc, k)?,
                            None => k,
                        });
                    }
                    output
                }
            };
        }
        let st = &self.standardizer;
        let mu_n = g.column(h, 0)?;
        let mu = g.scale(mu_n, st.y_scale)?;
        let shift = g.scalar(st.y_mean);
        let mu = g.add(mu, shift)?;
        let log_var = if self.spec.variant.has_sigma() {
            let lv_n = g.column(h, 1)?;
            let offset = g.scalar(2.0 * st.y_scale.ln());
            let lv = g.add(lv_n, offset)?;
            Some(g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?)
        } else {
            None
        };
        Ok(ForwardPass {
            mu,
            log_var,
            kl,
            params,
        })
    }

    /// One forward pass without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Vec<GaussianPrediction>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, x, mode, rng)?;
        let mu = g.value(pass.mu).data();
        let lv = pass.log_var.map(|v| g.value(v).data());
        Ok(mu
            .iter()
            .enumerate()
            .map(|(i, &m)| GaussianPrediction {
                mu: m,
                log_var: lv.map(|l| l[i]),
            })
            .collect())
    }

    /// Training objective for one batch.
    ///
    /// * `cnn`: mean squared error
    /// * `cnn_sigma`: summed Gaussian NLL
    /// * `bcnn`: summed fixed-variance (σ = 1) NLL + `kl_weight`·KL
    /// * `bcnn_sigma`: summed Gaussian NLL + `kl_weight`·KL
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        kl_weight: f64,
        rng: &mut dyn RngCore,
    ) -> Result<LossPass> {
        if batch.is_empty() {
            return Err(Error::Contract("loss on an empty batch".into()));
        }
        let pass = self.forward(g, &batch.x, mode, rng)?;
        let y = g.constant(Tensor::vector(batch.y.clone()));
        let nll = match self.spec.variant {
            Variant::Cnn => {
                let r = g.sub(y, pass.mu)?;
                let sq = g.square(r)?;
                g.mean(sq)?
            }
            Variant::Bcnn => {
                let lv = g.scalar(FIXED_LOG_VAR);
                gaussian_nll_sum(g, y, pass.mu, lv)?
            }
            Variant::CnnSigma | Variant::BcnnSigma => {
                let lv = pass.log_var.expect("sigma variant has a log-variance head");
                gaussian_nll_sum(g, y, pass.mu, lv)?
            }
        };
        let loss = match pass.kl {
            Some(kl) => elbo_loss(g, nll, kl, kl_weight)?,
            None => nll,
        };
        Ok(LossPass {
            loss,
            nll,
            kl: pass.kl,
            params: pass.params,
        })
    }
}
