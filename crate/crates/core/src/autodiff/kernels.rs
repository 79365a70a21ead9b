//! Raw loops behind the dense linear-algebra ops. All buffers are row-major.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }

    /// Calls `f(x_index, k_index, out_index)` for every multiply-accumulate term.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_base = ((n * oh + oy) * ow + ox) * self.c_out;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let iy = oy * self.stride + ky;
                            let ix = ox * self.stride + kx;
                            let x_base = ((n * self.h + iy) * self.w + ix) * self.c_in;
                            let k_base = (ky * self.kw + kx) * self.c_in * self.c_out;
                            for ci in 0..self.c_in {
                                for co in 0..self.c_out {
                                    f(x_base + ci, k_base + ci * self.c_out + co, out_base + co);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; geo.batch * geo.out_h() * geo.out_w() * geo.c_out];
    geo.for_each_tap(|xi, ki, oi| out[oi] += x[xi] * k[ki]);
    out
}

pub(crate) fn conv2d_backward_input(geo: &ConvGeometry, g: &[f64], k: &[f64], gx: &mut [f64]) {
    geo.for_each_tap(|xi, ki, oi| gx[xi] += g[oi] * k[ki]);
}

pub(crate) fn conv2d_backward_kernel(geo: &ConvGeometry, g: &[f64], x: &[f64], gk: &mut [f64]) {
    geo.for_each_tap(|xi, ki, oi| gk[ki] += g[oi] * x[xi]);
}

/// 2×2 stride-2 mean pooling over `[batch, h, w, c]`; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool2_index(batch: usize, h: usize, w: usize, c: usize) -> Vec<[usize; 5]> {
    let (oh, ow) = (h / 2, w / 2);
    let mut taps = Vec::with_capacity(batch * oh * ow * c);
    for n in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at = |y: usize, x: usize| ((n * h + y) * w + x) * c + ch;
                    let o = ((n * oh + oy) * ow + ox) * c + ch;
                    taps.push([
                        o,
                        at(2 * oy, 2 * ox),
                        at(2 * oy, 2 * ox + 1),
                        at(2 * oy + 1, 2 * ox),
                        at(2 * oy + 1, 2 * ox + 1),
                    ]);
                }
            }
        }
    }
    taps
}
