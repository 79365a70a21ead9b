//! Deterministic and reparameterized dense / convolutional layers.
//!
//! Every layer binds its parameters onto the caller's [`Graph`] as fresh
//! leaves on each forward pass and hands the leaf handles back in
//! [`LayerPass::params`], so a training loop can read their gradients.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, Graph, Var};
use crate::error::{Error, Result};
use crate::probability::{mc_kl_term, reparameterize, PriorSpec};
use crate::tensor::Tensor;

/// Posterior standard deviation every variational weight starts from.
pub const INIT_POSTERIOR_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// How variational weights are realized on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fresh `ε ~ N(0, 1)` for every weight element.
    Sample,
    /// `ε = 0`: weights equal their posterior means.
    Mean,
}

/// Result of one layer forward pass.
#[derive(Clone, Debug)]
pub struct LayerPass {
    pub output: Var,
    /// Single-sample KL contribution; `None` for deterministic layers.
    pub kl: Option<Var>,
    /// Parameter leaves in [`Layer::params`] order.
    pub params: Vec<Var>,
    /// Realized weights `[w, b]` of a variational layer.
    pub sampled: Vec<Var>,
}

pub trait Layer {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut dyn RngCore)
        -> Result<LayerPass>;

    /// Named parameter tensors in a fixed order.
    fn params(&self) -> Vec<(&'static str, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

/// `U(−√(6/fan_in), √(6/fan_in))`
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let bound = he_uniform_bound(fan_in);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn init_rho(shape: &[usize]) -> Tensor {
    Tensor::full(shape, softplus_inv(INIT_POSTERIOR_SIGMA))
}

fn sample_eps(shape: &[usize], mode: Mode, rng: &mut dyn RngCore) -> Tensor {
    match mode {
        Mode::Mean => Tensor::zeros(shape),
        Mode::Sample => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape and data agree")
        }
    }
}

fn check_features(op: &'static str, g: &Graph, x: Var, expected: usize) -> Result<()> {
    match g.shape(x) {
        [_, d] if *d == expected => Ok(()),
        s => Err(Error::dim(op, format!("expected [n × {expected}] input, got {s:?}"))),
    }
}

/// Realizes `(μ, ρ)` pairs into weights and accumulates their KL.
fn variational_pass(
    g: &mut Graph,
    pairs: [(&Tensor, &Tensor); 2],
    prior: PriorSpec,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let mut params = Vec::with_capacity(4);
    let mut sampled = Vec::with_capacity(2);
    let mut kl: Option<Var> = None;
    for (mu, rho) in pairs {
        let mu_v = g.param(mu.clone());
        let rho_v = g.param(rho.clone());
        let eps = sample_eps(mu.shape(), mode, rng);
        let w = reparameterize(g, mu_v, rho_v, &eps)?;
        let term = mc_kl_term(g, w, mu_v, rho_v, prior)?;
        kl = Some(match kl {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        params.extend([mu_v, rho_v]);
        sampled.push(w);
    }
    Ok((params, sampled, kl.expect("two pairs")))
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let z = g.add(xw, b)?;
    act.apply(g, z)
}

fn conv_affine(g: &mut Graph, x: Var, k: Var, b: Var, stride: usize, act: Activation) -> Result<Var> {
    let z = g.conv2d(x, k, stride)?;
    let z = g.add(z, b)?;
    act.apply(g, z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        match (weights.shape(), bias.shape()) {
            ([_, out], [b]) if out == b => Ok(Self {
                weights,
                bias,
                activation,
            }),
            (w, b) => Err(Error::dim("dense", format!("weights {w:?} with bias {b:?}"))),
        }
    }

    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut dyn RngCore) -> Self {
        Self {
            weights: he_uniform(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn init_seeded(inputs: usize, outputs: usize, activation: Activation, seed: u64) -> Self {
        Self::init(inputs, outputs, activation, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

impl Layer for DenseLayer {
    fn forward(&self, g: &mut Graph, x: Var, _: Mode, _: &mut dyn RngCore) -> Result<LayerPass> {
        check_features("dense", g, x, self.inputs())?;
        let w = g.param(self.weights.clone());
        let b = g.param(self.bias.clone());
        Ok(LayerPass {
            output: affine(g, x, w, b, self.activation)?,
            kl: None,
            params: vec![w, b],
            sampled: Vec::new(),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.weights), ("b", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Dense layer with a factorized Gaussian posterior over weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalDenseLayer {
    pub w_mu: Tensor,
    pub w_rho: Tensor,
    pub b_mu: Tensor,
    pub b_rho: Tensor,
    pub activation: Activation,
    pub prior: PriorSpec,
}

impl VariationalDenseLayer {
    pub fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        prior: PriorSpec,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            w_mu: he_uniform(&[inputs, outputs], inputs, rng),
            w_rho: init_rho(&[inputs, outputs]),
            b_mu: Tensor::zeros(&[outputs]),
            b_rho: init_rho(&[outputs]),
            activation,
            prior,
        }
    }

    pub fn init_seeded(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        prior: PriorSpec,
        seed: u64,
    ) -> Self {
        Self::init(inputs, outputs, activation, prior, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn inputs(&self) -> usize {
        self.w_mu.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w_mu.shape()[1]
    }

    /// Deterministic layer whose weights are this layer's posterior means.
    pub fn mean_layer(&self) -> DenseLayer {
        DenseLayer {
            weights: self.w_mu.clone(),
            bias: self.b_mu.clone(),
            activation: self.activation,
        }
    }
}

impl Layer for VariationalDenseLayer {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<LayerPass> {
        check_features("variational dense", g, x, self.inputs())?;
        let (params, sampled, kl) = variational_pass(
            g,
            [(&self.w_mu, &self.w_rho), (&self.b_mu, &self.b_rho)],
            self.prior,
            mode,
            rng,
        )?;
        Ok(LayerPass {
            output: affine(g, x, sampled[0], sampled[1], self.activation)?,
            kl: Some(kl),
            params,
            sampled,
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_mu", &self.w_mu),
            ("w_rho", &self.w_rho),
            ("b_mu", &self.b_mu),
            ("b_rho", &self.b_rho),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_mu, &mut self.w_rho, &mut self.b_mu, &mut self.b_rho]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    /// `[kh, kw, c_in, c_out]`
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub activation: Activation,
}

fn conv_fan_in(shape: &[usize; 4]) -> usize {
    shape[0] * shape[1] * shape[2]
}

impl Conv2dLayer {
    pub fn init(shape: [usize; 4], stride: usize, activation: Activation, rng: &mut dyn RngCore) -> Self {
        Self {
            kernels: he_uniform(&shape, conv_fan_in(&shape), rng),
            bias: Tensor::zeros(&[shape[3]]),
            stride,
            activation,
        }
    }
}

impl Layer for Conv2dLayer {
    fn forward(&self, g: &mut Graph, x: Var, _: Mode, _: &mut dyn RngCore) -> Result<LayerPass> {
        let k = g.param(self.kernels.clone());
        let b = g.param(self.bias.clone());
        Ok(LayerPass {
            output: conv_affine(g, x, k, b, self.stride, self.activation)?,
            kl: None,
            params: vec![k, b],
            sampled: Vec::new(),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("k", &self.kernels), ("b", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalConv2dLayer {
    pub k_mu: Tensor,
    pub k_rho: Tensor,
    pub b_mu: Tensor,
    pub b_rho: Tensor,
    pub stride: usize,
    pub activation: Activation,
    pub prior: PriorSpec,
}

impl VariationalConv2dLayer {
    pub fn init(
        shape: [usize; 4],
        stride: usize,
        activation: Activation,
        prior: PriorSpec,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            k_mu: he_uniform(&shape, conv_fan_in(&shape), rng),
            k_rho: init_rho(&shape),
            b_mu: Tensor::zeros(&[shape[3]]),
            b_rho: init_rho(&[shape[3]]),
            stride,
            activation,
            prior,
        }
    }

    pub fn mean_layer(&self) -> Conv2dLayer {
        Conv2dLayer {
            kernels: self.k_mu.clone(),
            bias: self.b_mu.clone(),
            stride: self.stride,
            activation: self.activation,
        }
    }
}

impl Layer for VariationalConv2dLayer {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<LayerPass> {
        let (params, sampled, kl) = variational_pass(
            g,
            [(&self.k_mu, &self.k_rho), (&self.b_mu, &self.b_rho)],
            self.prior,
            mode,
            rng,
        )?;
        Ok(LayerPass {
            output: conv_affine(g, x, sampled[0], sampled[1], self.stride, self.activation)?,
            kl: Some(kl),
            params,
            sampled,
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("k_mu", &self.k_mu),
            ("k_rho", &self.k_rho),
            ("b_mu", &self.b_mu),
            ("b_rho", &self.b_rho),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.k_mu, &mut self.k_rho, &mut self.b_mu, &mut self.b_rho]
    }
}
