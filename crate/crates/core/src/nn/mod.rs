//! Minimal CPU network engine: NCHW tensors, explicit forward caches and
//! hand-written backward passes.
//!
//! Forward passes take `&self` and return a cache, so a frozen network can be
//! shared across threads. Gradients accumulate into a second instance of the
//! same model type (see [`zeros_like`]), which the optimizer walks in lockstep
//! with the parameters.

mod act;
mod adam;
mod layers;
pub mod ops;
mod real;

pub use act::Activation;
pub use adam::{Adam, AdamState};
pub use layers::{
    BatchNorm2d, BnCache, Conv2d, Conv2dCache, ConvTranspose2d, DeconvCache, Layer, LayerCache,
    LayerKind, Linear, Sequential,
};
pub use real::Real;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Tensor<T> = ndarray::Array4<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; caches feed [`Parameterized`] updates.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

/// Weight initialisation for conv, de-conv and linear layers.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Init {
    /// Zero-mean normal with fixed standard deviation.
    Normal { std: f64 },
    /// Zero-mean normal with std `1/sqrt(fan_in)`, the self-normalising choice for SeLU.
    LecunNormal,
}

impl Init {
    pub(crate) fn sample<T: Real, R: Rng + ?Sized>(&self, fan_in: usize, n: usize, rng: &mut R) -> Vec<T> {
        let std = match *self {
            Init::Normal { std } => std,
            Init::LecunNormal => 1.0 / (fan_in.max(1) as f64).sqrt(),
        };
        if std == 0.0 {
            return vec![T::zero(); n];
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| T::c(dist.sample(rng))).collect()
    }
}

/// Uniform access to trainable parameters and non-trainable buffers.
///
/// Visit order is fixed by construction; checkpoints and optimizers rely on it.
pub trait Parameterized<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&[T]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T]));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&[T])) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut [T])) {}
}

pub fn count_params<T: Real, P: Parameterized<T> + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit_params(&mut |s| n += s.len());
    n
}

pub fn fill_params<T: Real, P: Parameterized<T> + ?Sized>(p: &mut P, v: T) {
    p.visit_params_mut(&mut |s| s.fill(v));
}

/// A copy of `p` with every trainable parameter zeroed, used as a gradient accumulator.
pub fn zeros_like<T: Real, P: Parameterized<T> + Clone>(p: &P) -> P {
    let mut g = p.clone();
    fill_params(&mut g, T::zero());
    g
}

pub fn flatten_params<T: Real, P: Parameterized<T> + ?Sized>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit_params(&mut |s| out.extend_from_slice(s));
    out
}

/// SHA-256 over the little-endian bytes of all parameters and buffers.
pub fn digest<T: Real, P: Parameterized<T> + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    let mut feed = |s: &[T]| {
        buf.clear();
        for &v in s {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    };
    p.visit_params(&mut feed);
    p.visit_buffers(&mut feed);
    hex::encode(h.finalize())
}

/// Squared L2 norm of all parameters, summed in f64.
pub fn params_norm_sq<T: Real, P: Parameterized<T> + ?Sized>(p: &P) -> f64 {
    let mut acc = 0.0;
    p.visit_params(&mut |s| acc += s.iter().map(|v| v.f64() * v.f64()).sum::<f64>());
    acc
}

/// Finite-difference helpers for gradient verification.
pub mod gradcheck {
    /// `|a - b| / max(|a|, |b|)`, with the denominator floored at `1e-8`.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    /// Central difference of `f` at `x[idx]` with step `h`; `x` is restored.
    pub fn central_difference(x: &mut [f64], idx: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let orig = x[idx];
        x[idx] = orig + h;
        let plus = f(x);
        x[idx] = orig - h;
        let minus = f(x);
        x[idx] = orig;
        (plus - minus) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_difference, relative_error};
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        let d = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_simple_fn(shape, || d.sample(rng))
    }

    /// Checks input and parameter gradients of `loss = sum(layer(x) * r)`.
    fn check_layer(layer: Layer<f64>, x: Array4<f64>, mode: Mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (y, cache) = layer.forward(&x, mode);
        let r = rand4(y.dim(), &mut rng);
        let mut grads = zeros_like(&layer);
        let gx = layer.backward(&cache, &r, Some(&mut grads));
        let loss = |l: &Layer<f64>, x: &Array4<f64>| (l.forward(x, mode).0 * &r).sum();

        let mut xs = x.as_slice().unwrap().to_vec();
        for idx in (0..xs.len()).step_by((xs.len() / 13).max(1)) {
            let num = central_difference(&mut xs, idx, 1e-5, |v| {
                loss(&layer, &Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap())
            });
            let ana = gx.as_slice().unwrap()[idx];
            assert!(relative_error(ana, num) < 1e-5, "input grad {idx}: {ana} vs {num}");
        }

        let flat_g = flatten_params(&grads);
        let mut flat_p = flatten_params(&layer);
        let n = flat_p.len();
        for idx in (0..n).step_by((n / 17).max(1)) {
            let num = central_difference(&mut flat_p, idx, 1e-5, |p| {
                let mut l = layer.clone();
                let mut off = 0;
                l.visit_params_mut(&mut |s| {
                    s.copy_from_slice(&p[off..off + s.len()]);
                    off += s.len();
                });
                loss(&l, &x)
            });
            assert!(relative_error(flat_g[idx], num) < 1e-5, "param grad {idx}: {} vs {num}", flat_g[idx]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Init::Normal { std: 0.3 };
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1)] {
            let layer = Layer::Conv(Conv2d::new(3, 4, k, s, p, true, init, &mut rng));
            check_layer(layer, rand4((2, 3, 7, 6), &mut rng), Mode::Train);
        }
    }

    #[test]
    fn deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Init::Normal { std: 0.3 };
        for &(k, s, p, op) in &[(5, 2, 0, 0), (4, 2, 1, 0), (3, 2, 1, 1), (3, 1, 1, 0)] {
            let layer = Layer::Deconv(ConvTranspose2d::new(3, 2, k, s, p, op, true, init, &mut rng));
            check_layer(layer, rand4((2, 3, 3, 3), &mut rng), Mode::Train);
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand4((3, 2, 3, 3), &mut rng);
        let mut bn = BatchNorm2d::new(2, true);
        bn.gamma = Some(ndarray::arr1(&[1.5, -0.7]));
        bn.beta = Some(ndarray::arr1(&[0.2, 0.1]));
        bn.running_mean = ndarray::arr1(&[0.1, -0.2]);
        bn.running_var = ndarray::arr1(&[0.8, 1.3]);
        check_layer(Layer::BatchNorm(bn.clone()), x.clone(), Mode::Train);
        check_layer(Layer::BatchNorm(bn), x.clone(), Mode::Eval);
        check_layer(Layer::BatchNorm(BatchNorm2d::new(2, false)), x, Mode::Train);
    }

    #[test]
    fn dense_and_shape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = Init::Normal { std: 0.3 };
        check_layer(Layer::Linear(Linear::new(12, 5, true, init, &mut rng)), rand4((3, 3, 2, 2), &mut rng), Mode::Train);
        check_layer(Layer::GlobalAvgPool, rand4((2, 3, 4, 4), &mut rng), Mode::Train);
        check_layer(Layer::L2Normalize, rand4((2, 6, 1, 1), &mut rng), Mode::Train);
        check_layer(Layer::Reshape { c: 2, h: 3, w: 2 }, rand4((2, 12, 1, 1), &mut rng), Mode::Train);
        for act in [Activation::Relu, Activation::Selu, Activation::Tanh] {
            check_layer(Layer::Act(act), rand4((2, 2, 3, 3), &mut rng), Mode::Train);
        }
    }

    #[test]
    fn deconv_output_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = Init::Normal { std: 0.02 };
        let first = ConvTranspose2d::<f32>::new(8, 4, 5, 2, 0, 0, false, init, &mut rng);
        assert_eq!(first.output_size(1), 5);
        let double = ConvTranspose2d::<f32>::new(4, 4, 4, 2, 1, 0, false, init, &mut rng);
        assert_eq!(double.output_size(5), 10);
        assert_eq!(double.output_size(80), 160);
        let (y, _) = double.forward(&Array4::zeros((2, 4, 5, 5)));
        assert_eq!(y.dim(), (2, 4, 10, 10));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::<f64>::new(2, 1, false, Init::Normal { std: 0.0 }, &mut rng);
        let mut g = zeros_like(&lin);
        g.weight.fill(1.0);
        let mut opt = Adam::new(0.5, 0.999);
        opt.step(&mut lin, &g, 0.1);
        // First bias-corrected Adam step has magnitude lr regardless of gradient scale.
        for &w in lin.weight.iter() {
            assert!((w + 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn digest_tracks_buffers() {
        let mut bn = BatchNorm2d::<f32>::new(3, true);
        let before = digest(&bn);
        bn.running_mean[0] = 0.5;
        assert_ne!(before, digest(&bn));
    }
}
