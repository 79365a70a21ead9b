//! Gaussian densities, the reparameterization trick, the single-sample KL
//! estimate and their assembly into the variational free-energy loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `½·ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Bounds applied to a predicted log-variance before it is exponentiated.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Gaussian parameterized by mean and natural-log variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub log_var: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, log_var: f64) -> Self {
        Self { mu, log_var }
    }

    pub fn variance(&self) -> f64 {
        self.log_var.exp()
    }
}

/// Zero-mean Gaussian prior over every weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma_p: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { sigma_p: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(sigma_p: f64) -> Result<Self> {
        let prior = Self { sigma_p };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_p > 0.0 && self.sigma_p.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "prior sigma must be positive, got {}",
                self.sigma_p
            )))
        }
    }

    pub fn log_var(&self) -> f64 {
        2.0 * self.sigma_p.ln()
    }
}

/// `ln N(x | mu, exp(log_var))`
pub fn gaussian_log_pdf(x: f64, mu: f64, log_var: f64) -> f64 {
    let d = x - mu;
    -HALF_LN_2PI - 0.5 * log_var - 0.5 * d * d * (-log_var).exp()
}

/// Elementwise [`gaussian_log_pdf`] over tensors with the autodiff broadcasting rules.
pub fn gaussian_log_pdf_tensor(x: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, mu, lv) = (
        g.constant(x.clone()),
        g.constant(mu.clone()),
        g.constant(log_var.clone()),
    );
    let out = log_pdf(&mut g, x, mu, lv)?;
    Ok(g.value(out).clone())
}

/// Differentiable elementwise Gaussian log-density.
pub fn log_pdf(g: &mut Graph, x: Var, mu: Var, log_var: Var) -> Result<Var> {
    let diff = g.sub(x, mu)?;
    let sq = g.square(diff)?;
    let neg_lv = g.neg(log_var)?;
    let precision = g.exp(neg_lv)?;
    let quad = g.mul(sq, precision)?;
    let quad = g.add(quad, log_var)?;
    let half = g.scale(quad, -0.5)?;
    let c = g.scalar(-HALF_LN_2PI);
    g.add(half, c)
}

/// `ω = μ + softplus(ρ) ⊙ ε`, differentiable in `μ` and `ρ`.
pub fn reparameterize(g: &mut Graph, mu: Var, rho: Var, eps: &Tensor) -> Result<Var> {
    if g.shape(mu) != g.shape(rho) || g.shape(mu) != eps.shape() {
        return Err(Error::dim(
            "reparameterize",
            format!(
                "mu {:?}, rho {:?}, eps {:?}",
                g.shape(mu),
                g.shape(rho),
                eps.shape()
            ),
        ));
    }
    let sigma = g.softplus(rho)?;
    let eps = g.constant(eps.clone());
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

/// Single-sample estimate `Σ [ln q(ω | μ, softplus(ρ)²) − ln p(ω | 0, σ_p²)]`.
pub fn mc_kl_term(g: &mut Graph, omega: Var, mu: Var, rho: Var, prior: PriorSpec) -> Result<Var> {
    let sigma = g.softplus(rho)?;
    let log_sigma = g.log(sigma)?;
    let q_log_var = g.scale(log_sigma, 2.0)?;
    let log_q = log_pdf(g, omega, mu, q_log_var)?;

    let zero = g.scalar(0.0);
    let p_log_var = g.scalar(prior.log_var());
    let log_p = log_pdf(g, omega, zero, p_log_var)?;

    let diff = g.sub(log_q, log_p)?;
    g.sum(diff)
}

/// `−ln N(y | μ, σ²)`
pub fn gaussian_nll(y: f64, pred: GaussianParams) -> f64 {
    -gaussian_log_pdf(y, pred.mu, pred.log_var)
}

/// Summed negative log-likelihood of a batch of targets.
pub fn gaussian_nll_sum(g: &mut Graph, y: Var, mu: Var, log_var: Var) -> Result<Var> {
    let lp = log_pdf(g, y, mu, log_var)?;
    let total = g.sum(lp)?;
    g.neg(total)
}

/// `batch_nll + kl_weight · kl`.
///
/// A weight of zero is accepted and yields the deterministic-network limit.
pub fn elbo_loss(g: &mut Graph, batch_nll: Var, kl: Var, kl_weight: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(Error::Contract(format!(
            "kl_weight must lie in [0, 1], got {kl_weight}"
        )));
    }
    let weighted = g.scale(kl, kl_weight)?;
    g.add(batch_nll, weighted)
}

/// Closed-form `KL(N(μ_q, σ_q²) ‖ N(0, σ_p²))`.
pub fn gaussian_kl_closed_form(mu_q: f64, sigma_q: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + mu_q * mu_q) / (2.0 * sigma_p * sigma_p) - 0.5
}
