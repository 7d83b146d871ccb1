//! Minimal layers with hand-written backward passes.
//!
//! Tensors are `ndarray` arrays in NCHW layout. Every layer exposes
//! `forward` (returns what `backward` needs), `infer` (no cache) and
//! `backward`, which accumulates parameter gradients and returns the gradient
//! with respect to the layer input.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Replaces the value, resetting optimizer state. Shapes must agree.
    pub fn assign(&mut self, value: ArrayD<f32>) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "shape mismatch for {}",
            self.name
        );
        self.value = value;
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal on fan-in.
    He,
    Normal(f32),
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> ArrayD<f32> {
    let std = match init {
        Init::He => (2.0 / fan_in as f32).sqrt(),
        Init::Normal(s) => s,
    };
    let normal = Normal::new(0.0f32, std).expect("positive std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Vec<Array2<f32>>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch]))),
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> Array2<f32> {
        let o = self.out_channels();
        self.weight
            .value
            .view()
            .into_shape_with_order((o, self.weight.value.len() / o))
            .expect("contiguous weight")
            .to_owned()
    }

    fn run(&self, x: &Array4<f32>, keep: bool) -> (Array4<f32>, Option<ConvCache>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let mut out = Array4::<f32>::zeros((n, o, ho, wo));
        let mut cols_all = Vec::with_capacity(if keep { n } else { 0 });
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        for b in 0..n {
            let sample = &xs[b * c * h * w..(b + 1) * c * h * w];
            let cols = im2col(
                sample,
                c,
                h,
                w,
                self.kernel,
                self.stride,
                self.padding,
                ho,
                wo,
            );
            let y = wm.dot(&cols);
            let mut dst = out.index_axis_mut(Axis(0), b);
            let dst = dst.as_slice_mut().expect("fresh array");
            let ys = y.as_slice().expect("fresh array");
            for oc in 0..o {
                let bv = bias[oc];
                for (d, s) in dst[oc * ho * wo..(oc + 1) * ho * wo]
                    .iter_mut()
                    .zip(&ys[oc * ho * wo..(oc + 1) * ho * wo])
                {
                    *d = s + bv;
                }
            }
            if keep {
                cols_all.push(cols);
            }
        }
        let cache = keep.then_some(ConvCache {
            cols: cols_all,
            in_shape: (n, c, h, w),
        });
        (out, cache)
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (y, cache) = self.run(x, true);
        (y, cache.expect("cache requested"))
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        self.run(x, false).0
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, dy: &Array4<f32>, cache: &ConvCache) -> Array4<f32> {
        let (n, c, h, w) = cache.in_shape;
        let (_, o, ho, wo) = dy.dim();
        let wm = self.weight_matrix();
        let mut dw = Array2::<f32>::zeros(wm.raw_dim());
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let mut db = vec![0.0f32; o];
        for b in 0..n {
            let dyb = dy
                .index_axis(Axis(0), b)
                .to_owned()
                .into_shape_with_order((o, ho * wo))
                .expect("contiguous");
            for (oc, row) in dyb.outer_iter().enumerate() {
                db[oc] += row.sum();
            }
            dw = dw + dyb.dot(&cache.cols[b].t());
            let dcols = wm.t().dot(&dyb);
            let mut dst = dx.index_axis_mut(Axis(0), b);
            col2im(
                dcols.as_slice().expect("fresh array"),
                dst.as_slice_mut().expect("fresh array"),
                c,
                h,
                w,
                self.kernel,
                self.stride,
                self.padding,
                ho,
                wo,
            );
        }
        let dw = dw
            .into_shape_with_order(IxDyn(self.weight.shape()))
            .expect("same size");
        self.weight.grad += &dw;
        for (g, d) in self.bias.grad.iter_mut().zip(db) {
            *g += d;
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let mut cols = vec![0.0f32; c * k * k * ho * wo];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + ii as usize) * w;
                    let dst_row = base + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            cols[dst_row + oj] = x[src_row + jj as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ho * wo), cols).expect("sized")
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    dx: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ii as usize) * w;
                    let src_row = base + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[dst_row + jj as usize] += cols[src_row + oj];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init_tensor(&[output, input], input, init, rng),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[output]))),
        }
    }

    fn matrices(&self) -> (Array2<f32>, Array1<f32>) {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality()
            .expect("2-d weight")
            .to_owned();
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality()
            .expect("1-d bias")
            .to_owned();
        (w, b)
    }

    /// `x: (n, in) -> (n, out)`
    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        let (w, b) = self.matrices();
        x.dot(&w.t()) + &b
    }

    pub fn backward(&mut self, dy: &Array2<f32>, x: &Array2<f32>) -> Array2<f32> {
        let (w, _) = self.matrices();
        let dw = dy.t().dot(x).into_dyn();
        self.weight.grad += &dw;
        let db = dy.sum_axis(Axis(0)).into_dyn();
        self.bias.grad += &db;
        dy.dot(&w)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(
    dy: &mut ndarray::Array<f32, D>,
    y: &ndarray::Array<f32, D>,
) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit. Returns `(loss, dloss/dlogit)`.
pub fn bce_with_logits(logit: f32, target: f32) -> (f32, f32) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

/// Huber-style smooth L1. Returns `(loss, dloss/ddiff)`.
pub fn smooth_l1(diff: f32, beta: f32) -> (f32, f32) {
    if diff.abs() < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (diff.abs() - 0.5 * beta, diff.signum())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step = self.lr * bc2.sqrt() / bc1;
        for p in params.iter_mut() {
            let Param {
                value, grad, m, v, ..
            } = &mut **p;
            ndarray::Zip::from(value)
                .and(&*grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let norm = params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f32>())
        .sum::<f32>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}
