//! Convolutional building blocks with hand-written backward passes.
//!
//! Forward passes are pure: they take `&self` and return the intermediates
//! needed for backpropagation. Backward passes write parameter gradients into
//! flat buffers laid out exactly like the parameter slices handed to the
//! optimizer.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub type Tensor4 = Array4<f64>;

fn uniform_fill<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// 2-D convolution over NCHW tensors with square kernels and optional groups
/// (groups = channels gives a depthwise convolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in / groups, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    /// im2col matrix per group, `[c_g·k·k, b·oh·ow]`.
    cols: Vec<Array2<f64>>,
}

impl Conv2d {
    /// He-uniform initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let cg = in_channels / groups;
        let fan_in = (cg * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let len = out_channels * cg * kernel * kernel;
        let weight = Array4::from_shape_vec((out_channels, cg, kernel, kernel), uniform_fill(len, bound, rng))
            .expect("shape matches length");
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            stride,
            padding,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor4, group: usize, oh: usize, ow: usize) -> Array2<f64> {
        let (b, c, h, w) = x.dim();
        let cg = c / self.groups;
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = b * oh * ow;
        let mut cols = vec![0.0; cg * k * k * ncols];
        let xs = x.as_slice().expect("standard layout input");
        for ci in 0..cg {
            let channel = group * cg + ci;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for n in 0..b {
                        let base = (n * c + channel) * h * w;
                        for oy in 0..oh {
                            let iy = oy as isize * s - p + ki as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = base + iy as usize * w;
                            let dst_row = (n * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s - p + kj as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + ox] = xs[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((cg * k * k, ncols), cols).expect("im2col shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, group: usize, dx: &mut Tensor4, oh: usize, ow: usize) {
        let (b, c, h, w) = dx.dim();
        let cg = c / self.groups;
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = b * oh * ow;
        let src = dcols.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        for ci in 0..cg {
            let channel = group * cg + ci;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let srow = &src[row * ncols..(row + 1) * ncols];
                    for n in 0..b {
                        let base = (n * c + channel) * h * w;
                        for oy in 0..oh {
                            let iy = oy as isize * s - p + ki as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = base + iy as usize * w;
                            let src_row = (n * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s - p + kj as isize;
                                if ix >= 0 && ix < w as isize {
                                    dxs[dst_row + ix as usize] += srow[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn group_weight(&self, group: usize) -> ArrayView2<'_, f64> {
        let (out, cg, k, _) = self.weight.dim();
        let og = out / self.groups;
        let flat = self
            .weight
            .view()
            .into_shape_with_order((out, cg * k * k))
            .expect("contiguous weight");
        flat.slice_move(ndarray::s![group * og..(group + 1) * og, ..])
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, ConvCache) {
        let x = x.as_standard_layout();
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.weight.dim().1 * self.groups, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let out_c = self.out_channels();
        let og = out_c / self.groups;
        let mut out = Array4::zeros((b, out_c, oh, ow));
        let mut cols = Vec::with_capacity(self.groups);
        {
            let os = out.as_slice_mut().expect("fresh array");
            for g in 0..self.groups {
                let col = self.im2col(&x.to_owned(), g, oh, ow);
                let y = self.group_weight(g).dot(&col);
                for o in 0..og {
                    let oc = g * og + o;
                    let bias = self.bias[oc];
                    let yrow = y.row(o);
                    let yrow = yrow.as_slice().expect("row-major");
                    for n in 0..b {
                        let dst = (n * out_c + oc) * oh * ow;
                        let src = n * oh * ow;
                        for q in 0..oh * ow {
                            os[dst + q] = yrow[src + q] + bias;
                        }
                    }
                }
                cols.push(col);
            }
        }
        (
            out,
            ConvCache {
                input_dim: (b, c, h, w),
                out_hw: (oh, ow),
                cols,
            },
        )
    }

    /// Returns the input gradient; writes `[dW, db]` into `grads`.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Tensor4, grads: &mut [Vec<f64>]) -> Tensor4 {
        let grad_out = grad_out.as_standard_layout();
        let (b, c, h, w) = cache.input_dim;
        let (oh, ow) = cache.out_hw;
        let out_c = self.out_channels();
        let og = out_c / self.groups;
        let gs = grad_out.as_slice().expect("standard layout");
        let mut dx = Array4::zeros((b, c, h, w));
        let (dw, db) = grads.split_at_mut(1);
        let dw = &mut dw[0];
        let db = &mut db[0];
        let wlen = self.weight.len() / self.groups;
        for g in 0..self.groups {
            let mut dy = Array2::zeros((og, b * oh * ow));
            for o in 0..og {
                let oc = g * og + o;
                let mut row = dy.row_mut(o);
                let row = row.as_slice_mut().expect("row-major");
                let mut bias_acc = 0.0;
                for n in 0..b {
                    let src = (n * out_c + oc) * oh * ow;
                    let dst = n * oh * ow;
                    for q in 0..oh * ow {
                        let v = gs[src + q];
                        row[dst + q] = v;
                        bias_acc += v;
                    }
                }
                db[oc] += bias_acc;
            }
            let gw = dy.dot(&cache.cols[g].t());
            for (acc, v) in dw[g * wlen..(g + 1) * wlen].iter_mut().zip(gw.iter()) {
                *acc += v;
            }
            let dcols = self.group_weight(g).t().dot(&dy);
            self.col2im(&dcols.as_standard_layout().to_owned(), g, &mut dx, oh, ow);
        }
        dx
    }
}

/// Fully connected layer `y = x Wᵀ + b`, `W: [out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_vec((outputs, inputs), uniform_fill(inputs * outputs, bound, rng))
            .expect("shape matches length");
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns the input gradient; writes `[dW, db]` into `grads`.
    pub fn backward(&self, input: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut [Vec<f64>]) -> Array2<f64> {
        let gw = grad_out.t().dot(input);
        for (acc, v) in grads[0].iter_mut().zip(gw.iter()) {
            *acc += v;
        }
        let gb = grad_out.sum_axis(Axis(0));
        for (acc, v) in grads[1].iter_mut().zip(gb.iter()) {
            *acc += v;
        }
        grad_out.dot(&self.weight)
    }
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
fn avg_pool2(x: &Tensor4) -> Tensor4 {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array4::from_shape_fn((b, c, oh, ow), |(n, ch, y, z)| {
        0.25 * (x[[n, ch, 2 * y, 2 * z]]
            + x[[n, ch, 2 * y + 1, 2 * z]]
            + x[[n, ch, 2 * y, 2 * z + 1]]
            + x[[n, ch, 2 * y + 1, 2 * z + 1]])
    })
}

fn avg_pool2_backward(input_dim: (usize, usize, usize, usize), grad_out: &Tensor4) -> Tensor4 {
    let mut dx = Array4::zeros(input_dim);
    for ((n, ch, y, z), &g) in grad_out.indexed_iter() {
        let q = 0.25 * g;
        dx[[n, ch, 2 * y, 2 * z]] += q;
        dx[[n, ch, 2 * y + 1, 2 * z]] += q;
        dx[[n, ch, 2 * y, 2 * z + 1]] += q;
        dx[[n, ch, 2 * y + 1, 2 * z + 1]] += q;
    }
    dx
}

/// How a residual block routes its input around the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    Projection(Conv2d),
}

/// `body(x) + shortcut(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Shortcut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    AvgPool2,
    Residual(Residual),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    Relu(Tensor4),
    AvgPool2((usize, usize, usize, usize)),
    Residual(Vec<LayerCache>, Option<ConvCache>),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) => 2,
            Layer::Relu | Layer::AvgPool2 => 0,
            Layer::Residual(r) => {
                r.body.iter().map(Layer::param_count).sum::<usize>()
                    + matches!(r.shortcut, Shortcut::Projection(_)) as usize * 2
            }
        }
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        match self {
            Layer::Conv(c) => {
                out.push(c.weight.as_slice().expect("standard layout"));
                out.push(c.bias.as_slice().expect("standard layout"));
            }
            Layer::Relu | Layer::AvgPool2 => {}
            Layer::Residual(r) => {
                for l in &r.body {
                    l.collect_params(out);
                }
                if let Shortcut::Projection(c) = &r.shortcut {
                    out.push(c.weight.as_slice().expect("standard layout"));
                    out.push(c.bias.as_slice().expect("standard layout"));
                }
            }
        }
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            Layer::Conv(c) => {
                out.push(c.weight.as_slice_mut().expect("standard layout"));
                out.push(c.bias.as_slice_mut().expect("standard layout"));
            }
            Layer::Relu | Layer::AvgPool2 => {}
            Layer::Residual(r) => {
                for l in &mut r.body {
                    l.collect_params_mut(out);
                }
                if let Shortcut::Projection(c) = &mut r.shortcut {
                    out.push(c.weight.as_slice_mut().expect("standard layout"));
                    out.push(c.bias.as_slice_mut().expect("standard layout"));
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(x);
                (y, LayerCache::Conv(cache))
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::AvgPool2 => (avg_pool2(x), LayerCache::AvgPool2(x.dim())),
            Layer::Residual(r) => {
                let (mut y, caches) = forward_sequence(&r.body, x);
                let short = match &r.shortcut {
                    Shortcut::Identity => {
                        y += x;
                        None
                    }
                    Shortcut::Projection(c) => {
                        let (s, cache) = c.forward(x);
                        y += &s;
                        Some(cache)
                    }
                };
                (y, LayerCache::Residual(caches, short))
            }
        }
    }

    /// `grads` must hold exactly [`Layer::param_count`] buffers.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor4, grads: &mut [Vec<f64>]) -> Tensor4 {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cc)) => c.backward(cc, grad_out, grads),
            (Layer::Relu, LayerCache::Relu(y)) => {
                let mut g = grad_out.clone();
                g.zip_mut_with(y, |g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            (Layer::AvgPool2, LayerCache::AvgPool2(dim)) => avg_pool2_backward(*dim, grad_out),
            (Layer::Residual(r), LayerCache::Residual(caches, short)) => {
                let body_params: usize = r.body.iter().map(Layer::param_count).sum();
                let (body_grads, short_grads) = grads.split_at_mut(body_params);
                let mut dx = backward_sequence(&r.body, caches, grad_out, body_grads);
                match (&r.shortcut, short) {
                    (Shortcut::Identity, _) => dx += grad_out,
                    (Shortcut::Projection(c), Some(cc)) => dx += &c.backward(cc, grad_out, short_grads),
                    _ => unreachable!("shortcut cache mismatch"),
                }
                dx
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

pub fn forward_sequence(layers: &[Layer], x: &Tensor4) -> (Tensor4, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        let (y, c) = l.forward(&cur);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

pub fn backward_sequence(layers: &[Layer], caches: &[LayerCache], grad_out: &Tensor4, grads: &mut [Vec<f64>]) -> Tensor4 {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offsets.push(acc);
        acc += l.param_count();
    }
    let mut g = grad_out.clone();
    for (i, l) in layers.iter().enumerate().rev() {
        let span = offsets[i]..offsets[i] + l.param_count();
        g = l.backward(&caches[i], &g, &mut grads[span]);
    }
    g
}
