use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{col2im, from_channel_major, im2col, to_channel_major, PatchGeometry};
use super::{Activation, Init, Mode, Parameterized, Real};

fn visit_opt<T: Real>(a: &Option<Array1<T>>, f: &mut dyn FnMut(&[T])) {
    if let Some(a) = a {
        f(a.as_slice().expect("contiguous"));
    }
}

fn visit_opt_mut<T: Real>(a: &mut Option<Array1<T>>, f: &mut dyn FnMut(&mut [T])) {
    if let Some(a) = a {
        f(a.as_slice_mut().expect("contiguous"));
    }
}

/// Adds a per-channel bias to a channel-major matrix.
fn add_row_bias<T: Real>(m: &mut Array2<T>, bias: &Array1<T>) {
    for (mut row, &b) in m.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
}

fn accumulate_row_sums<T: Real>(gb: &mut Array1<T>, m: &Array2<T>) {
    for (g, row) in gb.iter_mut().zip(m.axis_iter(Axis(0))) {
        *g += row.sum();
    }
}

/// 2-D convolution, square kernel, weights `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dCache<T> {
    cols: Array2<T>,
    geo: PatchGeometry,
    batch: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init.sample(fan_in, out_ch * fan_in, rng);
        Self {
            weight: Array4::from_shape_vec((out_ch, in_ch, kernel, kernel), w).expect("weight shape"),
            bias: bias.then(|| Array1::zeros(out_ch)),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, Conv2dCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let geo = PatchGeometry::conv(c, h, w, self.kernel(), self.stride, self.pad);
        let cols = im2col(&x.view(), &geo);
        let mut y = Array2::zeros((self.out_channels(), cols.ncols()));
        general_mat_mul(T::one(), &self.weight_matrix(), &cols, T::zero(), &mut y);
        if let Some(b) = &self.bias {
            add_row_bias(&mut y, b);
        }
        let out = from_channel_major(y, n, geo.grid_h, geo.grid_w);
        (out, Conv2dCache { cols, geo, batch: n })
    }

    pub fn backward(&self, cache: &Conv2dCache<T>, gy: &Array4<T>, grad: Option<&mut Self>) -> Array4<T> {
        let gy_mat = to_channel_major(&gy.view());
        if let Some(g) = grad {
            let (o, i, k, _) = g.weight.dim();
            let mut gw = g
                .weight
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous weight");
            general_mat_mul(T::one(), &gy_mat, &cache.cols.t(), T::one(), &mut gw);
            if let Some(gb) = &mut g.bias {
                accumulate_row_sums(gb, &gy_mat);
            }
        }
        let mut gcols = Array2::zeros(cache.cols.dim());
        general_mat_mul(T::one(), &self.weight_matrix().t(), &gy_mat, T::zero(), &mut gcols);
        col2im(&gcols, &cache.geo, cache.batch)
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        f(self.weight.as_slice().expect("contiguous"));
        visit_opt(&self.bias, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.weight.as_slice_mut().expect("contiguous"));
        visit_opt_mut(&mut self.bias, f);
    }
}

/// Transposed (de-)convolution, weights `(in, out, k, k)`.
///
/// Output size is `(n - 1) * stride - 2 * pad + k + output_pad`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

#[derive(Clone, Debug)]
pub struct DeconvCache<T> {
    x_mat: Array2<T>,
    geo: PatchGeometry,
    batch: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        // Each output pixel of a strided de-conv sees roughly in_ch * (k / stride)^2 taps.
        let taps = (kernel / stride.max(1)).max(1);
        let w = init.sample(in_ch * taps * taps, in_ch * out_ch * kernel * kernel, rng);
        Self {
            weight: Array4::from_shape_vec((in_ch, out_ch, kernel, kernel), w).expect("weight shape"),
            bias: bias.then(|| Array1::zeros(out_ch)),
            stride,
            pad,
            output_pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel() + self.output_pad - 2 * self.pad
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let (i, o, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((i, o * k * k)).expect("contiguous weight")
    }

    fn geometry(&self, h: usize, w: usize) -> PatchGeometry {
        PatchGeometry {
            channels: self.out_channels(),
            img_h: self.output_size(h),
            img_w: self.output_size(w),
            kernel: self.kernel(),
            stride: self.stride,
            pad: self.pad,
            grid_h: h,
            grid_w: w,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, DeconvCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "de-conv input channels");
        let geo = self.geometry(h, w);
        let x_mat = to_channel_major(&x.view());
        let mut cols = Array2::zeros((geo.rows(), x_mat.ncols()));
        general_mat_mul(T::one(), &self.weight_matrix().t(), &x_mat, T::zero(), &mut cols);
        let mut y = col2im(&cols, &geo, n);
        if let Some(b) = &self.bias {
            for (ci, &bv) in b.iter().enumerate() {
                y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bv);
            }
        }
        (y, DeconvCache { x_mat, geo, batch: n })
    }

    pub fn backward(&self, cache: &DeconvCache<T>, gy: &Array4<T>, grad: Option<&mut Self>) -> Array4<T> {
        let gcols = im2col(&gy.view(), &cache.geo);
        if let Some(g) = grad {
            let (i, o, k, _) = g.weight.dim();
            let mut gw = g
                .weight
                .view_mut()
                .into_shape_with_order((i, o * k * k))
                .expect("contiguous weight");
            general_mat_mul(T::one(), &cache.x_mat, &gcols.t(), T::one(), &mut gw);
            if let Some(gb) = &mut g.bias {
                for (ci, gbv) in gb.iter_mut().enumerate() {
                    *gbv += gy.index_axis(Axis(1), ci).sum();
                }
            }
        }
        let mut gx = Array2::zeros(cache.x_mat.dim());
        general_mat_mul(T::one(), &self.weight_matrix(), &gcols, T::zero(), &mut gx);
        from_channel_major(gx, cache.batch, cache.geo.grid_h, cache.geo.grid_w)
    }
}

impl<T: Real> Parameterized<T> for ConvTranspose2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        f(self.weight.as_slice().expect("contiguous"));
        visit_opt(&self.bias, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.weight.as_slice_mut().expect("contiguous"));
        visit_opt_mut(&mut self.bias, f);
    }
}

/// Per-channel batch normalisation. `gamma`/`beta` are absent when not affine.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Option<Array1<T>>,
    pub beta: Option<Array1<T>>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            gamma: affine.then(|| Array1::ones(channels)),
            beta: affine.then(|| Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let count = n * h * w;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        match mode {
            Mode::Train => {
                for ci in 0..c {
                    let plane = x.index_axis(Axis(1), ci);
                    let mu = plane.iter().map(|v| v.f64()).sum::<f64>() / count as f64;
                    let v = plane.iter().map(|&v| (v.f64() - mu).powi(2)).sum::<f64>() / count as f64;
                    mean[ci] = T::c(mu);
                    var[ci] = T::c(v);
                }
            }
            Mode::Eval => {
                mean.assign(&self.running_mean);
                var.assign(&self.running_var);
            }
        }
        let inv_std = var.mapv(|v: T| T::one() / (v + T::c(self.eps)).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let (mu, s) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mu) * s);
        }
        let mut y = xhat.clone();
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            for ci in 0..c {
                let (gv, bv) = (g[ci], b[ci]);
                y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * gv + bv);
            }
        }
        let cache = BnCache { xhat, inv_std, batch_mean: mean, batch_var: var, mode };
        (y, cache)
    }

    /// Folds a training batch's statistics into the running estimates.
    pub fn absorb(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let (n, _, h, w) = cache.xhat.dim();
        let count = (n * h * w) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        for ci in 0..self.channels() {
            self.running_mean[ci] = keep * self.running_mean[ci] + m * cache.batch_mean[ci];
            self.running_var[ci] = keep * self.running_var[ci] + m * cache.batch_var[ci] * T::c(unbias);
        }
    }

    pub fn backward(&self, cache: &BnCache<T>, gy: &Array4<T>, grad: Option<&mut Self>) -> Array4<T> {
        let (n, c, h, w) = gy.dim();
        let count = T::c((n * h * w) as f64);
        if let Some(g) = grad {
            if let (Some(gg), Some(gb)) = (&mut g.gamma, &mut g.beta) {
                for ci in 0..c {
                    let gyc = gy.index_axis(Axis(1), ci);
                    let xc = cache.xhat.index_axis(Axis(1), ci);
                    gg[ci] += ndarray::Zip::from(&gyc).and(&xc).fold(T::zero(), |a, &g, &x| a + g * x);
                    gb[ci] += gyc.sum();
                }
            }
        }
        let mut gx = gy.clone();
        for ci in 0..c {
            let scale = self.gamma.as_ref().map_or(T::one(), |g| g[ci]);
            let s = cache.inv_std[ci];
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                Mode::Eval => gxc.mapv_inplace(|v| v * scale * s),
                Mode::Train => {
                    let xc = cache.xhat.index_axis(Axis(1), ci);
                    let sum_g = gxc.sum();
                    let sum_gx = ndarray::Zip::from(&gxc).and(&xc).fold(T::zero(), |a, &g, &x| a + g * x);
                    let k = scale * s / count;
                    ndarray::Zip::from(&mut gxc)
                        .and(&xc)
                        .for_each(|g, &x| *g = k * (count * *g - sum_g - x * sum_gx));
                }
            }
        }
        gx
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        visit_opt(&self.gamma, f);
        visit_opt(&self.beta, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        visit_opt_mut(&mut self.gamma, f);
        visit_opt_mut(&mut self.beta, f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        f(self.running_mean.as_slice().expect("contiguous"));
        f(self.running_var.as_slice().expect("contiguous"));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.running_mean.as_slice_mut().expect("contiguous"));
        f(self.running_var.as_slice_mut().expect("contiguous"));
    }
}

/// Fully connected layer over `(N, in, 1, 1)` tensors; weights `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, init: Init, rng: &mut R) -> Self {
        let w = init.sample(input, input * output, rng);
        Self {
            weight: Array2::from_shape_vec((output, input), w).expect("weight shape"),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    fn as_rows(x: &Array4<T>) -> ndarray::ArrayView2<'_, T> {
        let (n, c, h, w) = x.dim();
        x.view().into_shape_with_order((n, c * h * w)).expect("contiguous input")
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let xr = Self::as_rows(x);
        assert_eq!(xr.ncols(), self.weight.ncols(), "linear input width");
        let mut y = xr.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        let (n, o) = y.dim();
        y.into_shape_with_order((n, o, 1, 1)).expect("linear output")
    }

    pub fn backward(&self, x: &Array4<T>, gy: &Array4<T>, grad: Option<&mut Self>) -> Array4<T> {
        let xr = Self::as_rows(x);
        let gr = Self::as_rows(gy);
        if let Some(g) = grad {
            general_mat_mul(T::one(), &gr.t(), &xr, T::one(), &mut g.weight);
            if let Some(gb) = &mut g.bias {
                *gb += &gr.sum_axis(Axis(0));
            }
        }
        let gx = gr.dot(&self.weight);
        gx.into_shape_with_order(x.raw_dim()).expect("linear grad shape")
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        f(self.weight.as_slice().expect("contiguous"));
        visit_opt(&self.bias, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.weight.as_slice_mut().expect("contiguous"));
        visit_opt_mut(&mut self.bias, f);
    }
}

/// Layer of a [`Sequential`] stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Act(Activation),
    Linear(Linear<T>),
    /// `(N, *) -> (N, c, h, w)`.
    Reshape { c: usize, h: usize, w: usize },
    GlobalAvgPool,
    /// Per-sample unit L2 norm over all non-batch axes.
    L2Normalize,
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv(Conv2dCache<T>),
    Deconv(DeconvCache<T>),
    BatchNorm(BnCache<T>),
    Act { x: Array4<T>, y: Array4<T> },
    Linear { x: Array4<T> },
    Reshape { input: [usize; 4] },
    Pool { input: [usize; 4] },
    L2 { y: Array4<T>, norms: Vec<T> },
}

/// Serializable description of a layer's kind, for checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    Deconv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize, bias: bool },
    BatchNorm { channels: usize, affine: bool },
    Act(Activation),
    Linear { input: usize, output: usize, bias: bool },
    Reshape { c: usize, h: usize, w: usize },
    GlobalAvgPool,
    L2Normalize,
}

impl<T: Real> Layer<T> {
    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, LayerCache<T>) {
        match self {
            Layer::Conv(l) => {
                let (y, c) = l.forward(x);
                (y, LayerCache::Conv(c))
            }
            Layer::Deconv(l) => {
                let (y, c) = l.forward(x);
                (y, LayerCache::Deconv(c))
            }
            Layer::BatchNorm(l) => {
                let (y, c) = l.forward(x, mode);
                (y, LayerCache::BatchNorm(c))
            }
            Layer::Act(a) => {
                let y = a.apply(x);
                (y.clone(), LayerCache::Act { x: x.clone(), y })
            }
            Layer::Linear(l) => (l.forward(x), LayerCache::Linear { x: x.clone() }),
            Layer::Reshape { c, h, w } => {
                let n = x.dim().0;
                let y = x
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((n, *c, *h, *w))
                    .expect("reshape preserves size");
                (y, LayerCache::Reshape { input: dims(x) })
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dim();
                let hw = T::c((h * w) as f64);
                let y = Array4::from_shape_fn((n, c, 1, 1), |(i, j, _, _)| {
                    x.slice(ndarray::s![i, j, .., ..]).sum() / hw
                });
                (y, LayerCache::Pool { input: dims(x) })
            }
            Layer::L2Normalize => {
                let n = x.dim().0;
                let mut y = x.clone();
                let mut norms = Vec::with_capacity(n);
                for mut row in y.outer_iter_mut() {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::c(1e-12));
                    row.mapv_inplace(|v| v / norm);
                    norms.push(norm);
                }
                (y.clone(), LayerCache::L2 { y, norms })
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache<T>, gy: &Array4<T>, grad: Option<&mut Self>) -> Array4<T> {
        match (self, cache) {
            (Layer::Conv(l), LayerCache::Conv(c)) => l.backward(c, gy, grad.map(as_conv)),
            (Layer::Deconv(l), LayerCache::Deconv(c)) => l.backward(c, gy, grad.map(as_deconv)),
            (Layer::BatchNorm(l), LayerCache::BatchNorm(c)) => l.backward(c, gy, grad.map(as_bn)),
            (Layer::Act(a), LayerCache::Act { x, y }) => a.backward(x, y, gy),
            (Layer::Linear(l), LayerCache::Linear { x }) => l.backward(x, gy, grad.map(as_linear)),
            (Layer::Reshape { .. }, LayerCache::Reshape { input }) => {
                gy.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((input[0], input[1], input[2], input[3]))
                    .expect("reshape grad")
            }
            (Layer::GlobalAvgPool, LayerCache::Pool { input }) => {
                let [n, c, h, w] = *input;
                let hw = T::c((h * w) as f64);
                Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| gy[[i, j, 0, 0]] / hw)
            }
            (Layer::L2Normalize, LayerCache::L2 { y, norms }) => {
                let mut gx = gy.clone();
                for (i, mut row) in gx.outer_iter_mut().enumerate() {
                    let yi = y.index_axis(Axis(0), i);
                    let dot = ndarray::Zip::from(&row).and(&yi).fold(T::zero(), |a, &g, &v| a + g * v);
                    let inv = T::one() / norms[i];
                    ndarray::Zip::from(&mut row).and(&yi).for_each(|g, &v| *g = (*g - v * dot) * inv);
                }
                gx
            }
            _ => panic!("layer/cache mismatch"),
        }
    }

    pub fn absorb(&mut self, cache: &LayerCache<T>) {
        if let (Layer::BatchNorm(l), LayerCache::BatchNorm(c)) = (self, cache) {
            l.absorb(c);
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(l) => LayerKind::Conv {
                in_ch: l.in_channels(),
                out_ch: l.out_channels(),
                kernel: l.kernel(),
                stride: l.stride,
                pad: l.pad,
                bias: l.bias.is_some(),
            },
            Layer::Deconv(l) => LayerKind::Deconv {
                in_ch: l.in_channels(),
                out_ch: l.out_channels(),
                kernel: l.kernel(),
                stride: l.stride,
                pad: l.pad,
                output_pad: l.output_pad,
                bias: l.bias.is_some(),
            },
            Layer::BatchNorm(l) => LayerKind::BatchNorm { channels: l.channels(), affine: l.gamma.is_some() },
            Layer::Act(a) => LayerKind::Act(*a),
            Layer::Linear(l) => LayerKind::Linear {
                input: l.weight.ncols(),
                output: l.weight.nrows(),
                bias: l.bias.is_some(),
            },
            Layer::Reshape { c, h, w } => LayerKind::Reshape { c: *c, h: *h, w: *w },
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::L2Normalize => LayerKind::L2Normalize,
        }
    }

    /// Rebuilds a zero-initialised layer from its kind (weights are loaded afterwards).
    pub fn from_kind(kind: &LayerKind) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let zero = Init::Normal { std: 0.0 };
        match *kind {
            LayerKind::Conv { in_ch, out_ch, kernel, stride, pad, bias } => {
                Layer::Conv(Conv2d::new(in_ch, out_ch, kernel, stride, pad, bias, zero, &mut rng))
            }
            LayerKind::Deconv { in_ch, out_ch, kernel, stride, pad, output_pad, bias } => Layer::Deconv(
                ConvTranspose2d::new(in_ch, out_ch, kernel, stride, pad, output_pad, bias, zero, &mut rng),
            ),
            LayerKind::BatchNorm { channels, affine } => Layer::BatchNorm(BatchNorm2d::new(channels, affine)),
            LayerKind::Act(a) => Layer::Act(a),
            LayerKind::Linear { input, output, bias } => Layer::Linear(Linear::new(input, output, bias, zero, &mut rng)),
            LayerKind::Reshape { c, h, w } => Layer::Reshape { c, h, w },
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerKind::L2Normalize => Layer::L2Normalize,
        }
    }
}

fn dims<T>(x: &Array4<T>) -> [usize; 4] {
    let (a, b, c, d) = x.dim();
    [a, b, c, d]
}

fn as_conv<T>(l: &mut Layer<T>) -> &mut Conv2d<T> {
    match l {
        Layer::Conv(c) => c,
        _ => panic!("gradient container layout differs from model"),
    }
}

fn as_deconv<T>(l: &mut Layer<T>) -> &mut ConvTranspose2d<T> {
    match l {
        Layer::Deconv(c) => c,
        _ => panic!("gradient container layout differs from model"),
    }
}

fn as_bn<T>(l: &mut Layer<T>) -> &mut BatchNorm2d<T> {
    match l {
        Layer::BatchNorm(c) => c,
        _ => panic!("gradient container layout differs from model"),
    }
}

fn as_linear<T>(l: &mut Layer<T>) -> &mut Linear<T> {
    match l {
        Layer::Linear(c) => c,
        _ => panic!("gradient container layout differs from model"),
    }
}

impl<T: Real> Parameterized<T> for Layer<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        match self {
            Layer::Conv(l) => l.visit_params(f),
            Layer::Deconv(l) => l.visit_params(f),
            Layer::BatchNorm(l) => l.visit_params(f),
            Layer::Linear(l) => l.visit_params(f),
            _ => {}
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        match self {
            Layer::Conv(l) => l.visit_params_mut(f),
            Layer::Deconv(l) => l.visit_params_mut(f),
            Layer::BatchNorm(l) => l.visit_params_mut(f),
            Layer::Linear(l) => l.visit_params_mut(f),
            _ => {}
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        if let Layer::BatchNorm(l) = self {
            l.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        if let Layer::BatchNorm(l) = self {
            l.visit_buffers_mut(f);
        }
    }
}

/// A plain feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array4<T>, Vec<LayerCache<T>>) {
        self.forward_prefix(x, self.layers.len(), mode)
    }

    /// Runs only the first `depth` layers.
    pub fn forward_prefix(&self, x: &Array4<T>, depth: usize, mode: Mode) -> (Array4<T>, Vec<LayerCache<T>>) {
        let mut caches = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for layer in &self.layers[..depth] {
            let (y, c) = layer.forward(&cur, mode);
            caches.push(c);
            cur = y;
        }
        (cur, caches)
    }

    /// Backpropagates through as many layers as there are caches.
    pub fn backward(&self, caches: &[LayerCache<T>], gy: &Array4<T>, mut grad: Option<&mut Self>) -> Array4<T> {
        let mut g = gy.clone();
        for (i, cache) in caches.iter().enumerate().rev() {
            let gl = grad.as_deref_mut().map(|s| &mut s.layers[i]);
            g = self.layers[i].backward(cache, &g, gl);
        }
        g
    }

    pub fn absorb(&mut self, caches: &[LayerCache<T>]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            layer.absorb(cache);
        }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn from_kinds(kinds: &[LayerKind]) -> Self {
        Self::new(kinds.iter().map(Layer::from_kind).collect())
    }
}

impl<T: Real> Parameterized<T> for Sequential<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        self.layers.iter().for_each(|l| l.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.layers.iter_mut().for_each(|l| l.visit_buffers_mut(f));
    }
}
