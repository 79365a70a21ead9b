#![allow(dead_code)]

use bayescope::autodiff::{Graph, Var};
use bayescope::layers::Mode;
use bayescope::models::{Batch, InputKind, Model, ModelSpec, Variant};
use bayescope::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Random tensor with entries in `lo..hi`, optionally kept `margin` away from 0.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `f(inputs)` as an output node; the checked loss is `Σ w ⊙ out`
/// with fixed random weights `w`, so every output element contributes.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn forward_value(build: &Builder<'_>, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = weighted_loss(&mut g, out, weights).unwrap();
    g.value(loss).item().unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn gradcheck(build: &Builder<'_>, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.shape(out).to_vec();
    let weights = random_tensor(rng, &shape, -1.0, 1.0, 0.1);
    let loss = weighted_loss(&mut g, out, &weights).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric =
                (forward_value(build, &plus, &weights) - forward_value(build, &minus, &weights)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    worst
}

/// Random regression batch matching `input`.
pub fn random_batch(rng: &mut ChaCha8Rng, input: InputKind, n: usize) -> Batch {
    let x = match input {
        InputKind::Vector { dim } => random_tensor(rng, &[n, dim], -1.5, 1.5, 0.0),
        InputKind::Image { size, channels } => random_tensor(rng, &[n, size, size, channels], 0.0, 1.0, 0.0),
    };
    let y = (0..n).map(|_| rng.random_range(13.0..25.0)).collect();
    Batch::new(x, y).unwrap()
}

/// Loss of `model` on `batch` with noise drawn from a fresh stream seeded by `noise_seed`.
pub fn model_loss(model: &Model, batch: &Batch, kl_weight: f64, noise_seed: u64) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let pass = model.loss(&mut g, batch, Mode::Sample, kl_weight, &mut rng).unwrap();
    g.value(pass.loss).item().unwrap()
}

/// Frozen-noise finite-difference check of the full training loss with respect
/// to every parameter element (or to `limit` elements per array when given).
pub fn model_gradcheck(model: &Model, batch: &Batch, kl_weight: f64, noise_seed: u64, limit: Option<usize>) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let pass = model.loss(&mut g, batch, Mode::Sample, kl_weight, &mut rng).unwrap();
    g.backward(pass.loss).unwrap();
    let grads: Vec<Tensor> = pass.params.iter().map(|&v| g.grad(v)).collect();
    let mut worst: f64 = 0.0;
    for (k, grad) in grads.iter().enumerate() {
        let len = grad.numel();
        let count = limit.map_or(len, |l| l.min(len));
        for j in 0..count {
            let i = if count == len { j } else { j * len / count };
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[k].data_mut()[i] += delta;
                model_loss(&m, batch, kl_weight, noise_seed)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    worst
}

/// `model` with every parameter shifted by `U(−0.2, 0.2)`, moving it off the
/// exact-zero biases of a fresh initialization.
pub fn jitter(model: &Model, rng: &mut ChaCha8Rng) -> Model {
    let mut m = model.clone();
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

pub fn small_vector_spec(variant: Variant, dim: usize, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::vector(variant, dim, seed);
    spec.hidden = vec![4, 3];
    spec
}

/// Every differentiable op, each as a builder plus an input generator.
pub type InputGen = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Builder<'static>>,
    pub inputs: Box<InputGen>,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        inputs: Box::new(inputs),
    }
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -2.0, 2.0, 0.0)
}

pub fn op_cases() -> Vec<OpCase> {
    use bayescope::probability::{gaussian_nll_sum, log_pdf, mc_kl_term, reparameterize, PriorSpec};
    vec![
        case("add", |g, v| g.add(v[0], v[1]), |r| vec![rt(r, &[3, 4]), rt(r, &[3, 4])]),
        case("add_broadcast_scalar", |g, v| g.add(v[0], v[1]), |r| vec![rt(r, &[3, 4]), rt(r, &[])]),
        case("add_broadcast_trailing", |g, v| g.add(v[0], v[1]), |r| vec![rt(r, &[3, 4]), rt(r, &[4])]),
        case("sub", |g, v| g.sub(v[0], v[1]), |r| vec![rt(r, &[5]), rt(r, &[5])]),
        case("mul", |g, v| g.mul(v[0], v[1]), |r| vec![rt(r, &[2, 3]), rt(r, &[2, 3])]),
        case("mul_broadcast_trailing", |g, v| g.mul(v[0], v[1]), |r| vec![rt(r, &[2, 3]), rt(r, &[3])]),
        case(
            "div",
            |g, v| g.div(v[0], v[1]),
            |r| vec![rt(r, &[4]), random_tensor(r, &[4], 0.5, 2.0, 0.0)],
        ),
        case("neg", |g, v| g.neg(v[0]), |r| vec![rt(r, &[4])]),
        case("scale", |g, v| g.scale(v[0], -1.7), |r| vec![rt(r, &[4])]),
        case("exp", |g, v| g.exp(v[0]), |r| vec![rt(r, &[3, 2])]),
        case("log", |g, v| g.log(v[0]), |r| vec![random_tensor(r, &[5], 0.2, 3.0, 0.0)]),
        case("tanh", |g, v| g.tanh(v[0]), |r| vec![rt(r, &[5])]),
        case("relu", |g, v| g.relu(v[0]), |r| vec![random_tensor(r, &[6], -2.0, 2.0, 1e-3)]),
        case("softplus", |g, v| g.softplus(v[0]), |r| vec![random_tensor(r, &[6], -8.0, 8.0, 0.0)]),
        case("square", |g, v| g.square(v[0]), |r| vec![rt(r, &[5])]),
        case(
            "clamp",
            |g, v| g.clamp(v[0], -1.0, 1.0),
            |r| {
                let t = rt(r, &[6]);
                vec![t.map(|x| if (x.abs() - 1.0).abs() < 1e-3 { x * 1.1 } else { x })]
            },
        ),
        case("sum", |g, v| g.sum(v[0]), |r| vec![rt(r, &[3, 3])]),
        case("mean", |g, v| g.mean(v[0]), |r| vec![rt(r, &[3, 3])]),
        case("matmul", |g, v| g.matmul(v[0], v[1]), |r| vec![rt(r, &[3, 3]), rt(r, &[3, 3])]),
        case("matmul_rect", |g, v| g.matmul(v[0], v[1]), |r| vec![rt(r, &[2, 4]), rt(r, &[4, 3])]),
        case(
            "conv2d",
            |g, v| g.conv2d(v[0], v[1], 1),
            |r| vec![rt(r, &[6, 6, 2]), rt(r, &[3, 3, 2, 2])],
        ),
        case(
            "conv2d_batched_stride2",
            |g, v| g.conv2d(v[0], v[1], 2),
            |r| vec![rt(r, &[2, 7, 7, 1]), rt(r, &[3, 3, 1, 3])],
        ),
        case("avg_pool2", |g, v| g.avg_pool2(v[0]), |r| vec![rt(r, &[2, 4, 5, 2])]),
        case("reshape", |g, v| g.reshape(v[0], vec![6]), |r| vec![rt(r, &[2, 3])]),
        case("column", |g, v| g.column(v[0], 1), |r| vec![rt(r, &[4, 2])]),
        case("log_pdf", |g, v| log_pdf(g, v[0], v[1], v[2]), |r| vec![rt(r, &[4]), rt(r, &[4]), rt(r, &[4])]),
        case(
            "gaussian_nll_sum",
            |g, v| gaussian_nll_sum(g, v[0], v[1], v[2]),
            |r| vec![rt(r, &[5]), rt(r, &[5]), rt(r, &[5])],
        ),
        case(
            "reparameterize_kl",
            |g, v| {
                let eps = Tensor::new(vec![4], vec![0.3, -1.2, 0.8, 2.1]).unwrap();
                let w = reparameterize(g, v[0], v[1], &eps)?;
                mc_kl_term(g, w, v[0], v[1], PriorSpec::new(0.7).unwrap())
            },
            |r| vec![rt(r, &[4]), random_tensor(r, &[4], -4.0, 1.0, 0.0)],
        ),
    ]
}
