//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a dynamic tape: every op appends a node holding its
//! forward value and a record of its inputs. Because nodes are only ever
//! appended, creation order is already a topological order, and
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! ```
//! use bayescope::autodiff::Graph;
//! use bayescope::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = g.square(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Broadcasting is limited to two cases: a one-element operand against any
//! tensor, and a tensor whose shape is a trailing suffix of the other's
//! (e.g. `[n, k] + [k]`).

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geo: ConvGeometry },
    AvgPool2 { x: Var, taps: Vec<[usize; 5]> },
    Reshape(Var),
    Column { x: Var, index: usize, width: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(eʸ − 1) = y + ln(1 − e^{−y})
    y + (-(-y).exp()).ln_1p()
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (big, small) = if a.numel() >= b.numel() { (a, b) } else { (b, a) };
    if small.numel() == 1 || big.shape().ends_with(small.shape()) {
        Ok(big.shape().to_vec())
    } else {
        Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
        ))
    }
}

/// Local partial of a binary op: `(upstream, lhs, rhs) -> contribution`.
type Partial = fn(f64, f64, f64) -> f64;

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros if nothing has reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta, tb)?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive argument {bad}")));
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("reduce_mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::dim(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `x` is `[h, w, c_in]` or batched `[n, h, w, c_in]`; `kernels` is
    /// `[kh, kw, c_in, c_out]`. The output keeps the rank of `x`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (tx, tk) = (self.value(x), self.value(kernels));
        let (batch, h, w, c_in) = match tx.shape() {
            [h, w, c] => (1, *h, *w, *c),
            [n, h, w, c] => (*n, *h, *w, *c),
            s => return Err(Error::dim("conv2d", format!("input shape {s:?}"))),
        };
        let [kh, kw, kc, c_out] = *tk.shape() else {
            return Err(Error::dim("conv2d", format!("kernel shape {:?}", tk.shape())));
        };
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than input {h}×{w}"),
            ));
        }
        let geo = ConvGeometry {
            batch,
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            stride,
        };
        let out = kernels::conv2d_forward(&geo, tx.data(), tk.data());
        let shape = if tx.rank() == 3 {
            vec![geo.out_h(), geo.out_w(), c_out]
        } else {
            vec![batch, geo.out_h(), geo.out_w(), c_out]
        };
        let value = Tensor::new(shape, out)?;
        self.push("conv2d", value, Op::Conv2d { x, k: kernels, geo }, &[x, kernels])
    }

    /// 2×2 mean pooling with stride 2 over `[h, w, c]` or `[n, h, w, c]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (batch, h, w, c) = match tx.shape() {
            [h, w, c] => (1, *h, *w, *c),
            [n, h, w, c] => (*n, *h, *w, *c),
            s => return Err(Error::dim("avg_pool2", format!("input shape {s:?}"))),
        };
        if h < 2 || w < 2 {
            return Err(Error::dim("avg_pool2", format!("input {h}×{w} smaller than 2×2")));
        }
        let taps = kernels::avg_pool2_index(batch, h, w, c);
        let d = tx.data();
        let mut out = vec![0.0; taps.len()];
        for t in &taps {
            out[t[0]] = 0.25 * (d[t[1]] + d[t[2]] + d[t[3]] + d[t[4]]);
        }
        let shape = if tx.rank() == 3 {
            vec![h / 2, w / 2, c]
        } else {
            vec![batch, h / 2, w / 2, c]
        };
        let value = Tensor::new(shape, out)?;
        self.push("avg_pool2", value, Op::AvgPool2 { x, taps }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Column `index` of an `[n×k]` matrix, as a length-`n` vector.
    pub fn column(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        let [rows, width] = *tx.shape() else {
            return Err(Error::dim("column", format!("expected matrix, got {:?}", tx.shape())));
        };
        if index >= width {
            return Err(Error::dim("column", format!("column {index} of {width}")));
        }
        let data = (0..rows).map(|r| tx.data()[r * width + index]).collect();
        let value = Tensor::new(vec![rows], data)?;
        self.push("column", value, Op::Column { x, index, width }, &[x])
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// node's gradient. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();

        // Elementwise unary rule: d_in[j] += g[j] * local(x[j], out[j]).
        let unary = |adj: &mut [Option<Vec<f64>>], x: Var, local: &dyn Fn(f64, f64) -> f64| {
            if !needs(x) {
                return;
            }
            let xs = val(x);
            let acc = accumulate(adj, x, xs.len());
            for j in 0..xs.len() {
                acc[j] += g[j] * local(xs[j], out[j]);
            }
        };

        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) | &Op::Div(a, b) => {
                let (da, db) = (val(a), val(b));
                let (na, nb) = (da.len(), db.len());
                let (ga, gb): (Partial, Partial) =
                    match node.op {
                        Op::Add(..) => (|g, _, _| g, |g, _, _| g),
                        Op::Sub(..) => (|g, _, _| g, |g, _, _| -g),
                        Op::Mul(..) => (|g, _, y| g * y, |g, x, _| g * x),
                        _ => (|g, _, y| g / y, |g, x, y| -g * x / (y * y)),
                    };
                if needs(a) {
                    let acc = accumulate(adj, a, na);
                    for j in 0..g.len() {
                        acc[j % na] += ga(g[j], da[j % na], db[j % nb]);
                    }
                }
                if needs(b) {
                    let acc = accumulate(adj, b, nb);
                    for j in 0..g.len() {
                        acc[j % nb] += gb(g[j], da[j % na], db[j % nb]);
                    }
                }
            }
            &Op::Neg(x) => unary(adj, x, &|_, _| -1.0),
            &Op::Scale(x, c) => unary(adj, x, &|_, _| c),
            &Op::Exp(x) => unary(adj, x, &|_, y| y),
            &Op::Log(x) => unary(adj, x, &|v, _| 1.0 / v),
            &Op::Tanh(x) => unary(adj, x, &|_, y| 1.0 - y * y),
            &Op::Relu(x) => unary(adj, x, &|v, _| if v > 0.0 { 1.0 } else { 0.0 }),
            &Op::Softplus(x) => unary(adj, x, &|v, _| sigmoid(v)),
            &Op::Square(x) => unary(adj, x, &|v, _| 2.0 * v),
            &Op::Clamp { x, lo, hi } => {
                unary(adj, x, &|v, _| if v > lo && v < hi { 1.0 } else { 0.0 })
            }
            &Op::Sum(x) | &Op::Mean(x) => {
                if needs(x) {
                    let n = val(x).len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let acc = accumulate(adj, x, n);
                    acc.iter_mut().for_each(|a| *a += g[0] * scale);
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let acc = accumulate(adj, a, m * k);
                    kernels::matmul_acc_bt(g, val(b), acc, m, k, n);
                }
                if needs(b) {
                    let acc = accumulate(adj, b, k * n);
                    kernels::matmul_acc_at(val(a), g, acc, m, k, n);
                }
            }
            Op::Conv2d { x, k, geo } => {
                if needs(*x) {
                    let acc = accumulate(adj, *x, val(*x).len());
                    kernels::conv2d_backward_input(geo, g, val(*k), acc);
                }
                if needs(*k) {
                    let acc = accumulate(adj, *k, val(*k).len());
                    kernels::conv2d_backward_kernel(geo, g, val(*x), acc);
                }
            }
            Op::AvgPool2 { x, taps } => {
                if needs(*x) {
                    let acc = accumulate(adj, *x, val(*x).len());
                    for t in taps {
                        let share = 0.25 * g[t[0]];
                        for &src in &t[1..] {
                            acc[src] += share;
                        }
                    }
                }
            }
            &Op::Reshape(x) => unary(adj, x, &|_, _| 1.0),
            &Op::Column { x, index, width } => {
                if needs(x) {
                    let acc = accumulate(adj, x, val(x).len());
                    for (r, &gv) in g.iter().enumerate() {
                        acc[r * width + index] += gv;
                    }
                }
            }
        }
    }
}
