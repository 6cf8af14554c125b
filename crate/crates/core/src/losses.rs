//! Reconstruction losses.
//!
//! * Pixel loss: Minkowski distance of order `k` between two images,
//!   `(sum |x - x'|^k)^(1/k)`, optionally with the sum replaced by a per-pixel
//!   mean (so `k = 1` becomes the mean absolute error).
//! * Perceptual loss: `0.5 * ||F(x) - F(x')||^2` for a frozen feature map `F`.
//!
//! Batch objectives return the mean per-pair loss together with its gradient
//! with respect to the reconstructed images.

use ndarray::{Array4, ArrayView, ArrayView3, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{LayerCache, Mode, Real, Sequential};
use crate::{Error, Result};

pub use crate::nbnet::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Minkowski order `k >= 1` of the pixel loss.
    pub k: f64,
    /// Replace the pixel sum by a per-pixel mean.
    pub per_pixel_mean: bool,
    /// Identifier of the feature map used by the perceptual loss.
    pub feature_id: Option<String>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Pixel, k: 1.0, per_pixel_mean: true, feature_id: None }
    }
}

impl LossConfig {
    pub fn pixel(k: f64) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn perceptual(feature_id: impl Into<String>) -> Self {
        Self { kind: LossKind::Perceptual, feature_id: Some(feature_id.into()), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("loss.k must be a finite order >= 1, got {}", self.k)));
        }
        if self.kind == LossKind::Perceptual && self.feature_id.is_none() {
            return Err(Error::Config("perceptual loss needs loss.feature_id".into()));
        }
        Ok(())
    }
}

/// A fixed, differentiable feature map `F` for the perceptual loss.
///
/// Implementations never update their own parameters; `backward` only
/// propagates gradients to the input image.
pub trait FeatureMap<T: Real>: Send + Sync {
    fn id(&self) -> &str;
    fn forward(&self, x: &Array4<T>) -> (Array4<T>, Vec<LayerCache<T>>);
    fn backward(&self, caches: &[LayerCache<T>], g: &Array4<T>) -> Array4<T>;

    fn features(&self, x: &Array4<T>) -> Array4<T> {
        self.forward(x).0
    }
}

/// `F(x) = x`.
#[derive(Clone, Debug, Default)]
pub struct IdentityFeatures;

impl<T: Real> FeatureMap<T> for IdentityFeatures {
    fn id(&self) -> &str {
        "identity"
    }

    fn forward(&self, x: &Array4<T>) -> (Array4<T>, Vec<LayerCache<T>>) {
        (x.clone(), Vec::new())
    }

    fn backward(&self, _caches: &[LayerCache<T>], g: &Array4<T>) -> Array4<T> {
        g.clone()
    }
}

/// The leading layers of a network, evaluated in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SequentialFeatures<T> {
    id: String,
    net: Sequential<T>,
}

impl<T: Real> SequentialFeatures<T> {
    /// Keeps a private copy of the first `depth` layers of `net`.
    pub fn new(id: impl Into<String>, net: &Sequential<T>, depth: usize) -> Self {
        Self { id: id.into(), net: Sequential::new(net.layers[..depth].to_vec()) }
    }

    pub fn network(&self) -> &Sequential<T> {
        &self.net
    }
}

impl<T: Real> FeatureMap<T> for SequentialFeatures<T> {
    fn id(&self) -> &str {
        &self.id
    }

    fn forward(&self, x: &Array4<T>) -> (Array4<T>, Vec<LayerCache<T>>) {
        self.net.forward(x, Mode::Eval)
    }

    fn backward(&self, caches: &[LayerCache<T>], g: &Array4<T>) -> Array4<T> {
        self.net.backward(caches, g, None)
    }
}

fn check_shapes<D: Dimension>(a: &D, b: &D) -> Result<()> {
    if a != b {
        return Err(Error::Shape { expected: format!("{:?}", a.slice()), actual: format!("{:?}", b.slice()) });
    }
    Ok(())
}

fn check_order(k: f64) -> Result<()> {
    if !(k >= 1.0 && k.is_finite()) {
        return Err(Error::OutOfRange(format!("Minkowski order must be >= 1, got {k}")));
    }
    Ok(())
}

fn power_sum<T: Real, D: Dimension>(x: &ArrayView<T, D>, xr: &ArrayView<T, D>, k: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(x).and(xr).for_each(|&a, &b| {
        let d = (a.f64() - b.f64()).abs();
        acc += if k == 1.0 { d } else { d.powf(k) };
    });
    acc
}

/// `(sum |x - x'|^k)^(1/k)` over every element.
pub fn pixel_loss<T: Real, D: Dimension>(x: &ArrayView<T, D>, xr: &ArrayView<T, D>, k: f64) -> Result<f64> {
    check_order(k)?;
    check_shapes(&x.raw_dim(), &xr.raw_dim())?;
    Ok(power_sum(x, xr, k).powf(1.0 / k))
}

/// Pixel loss with the sum replaced by a per-element mean.
pub fn pixel_loss_mean<T: Real, D: Dimension>(x: &ArrayView<T, D>, xr: &ArrayView<T, D>, k: f64) -> Result<f64> {
    check_order(k)?;
    check_shapes(&x.raw_dim(), &xr.raw_dim())?;
    Ok((power_sum(x, xr, k) / x.len().max(1) as f64).powf(1.0 / k))
}

/// `0.5 * ||F(x) - F(x')||^2` for single images.
pub fn perceptual_loss<T: Real>(x: &ArrayView3<T>, xr: &ArrayView3<T>, f: &dyn FeatureMap<T>) -> Result<f64> {
    check_shapes(&x.raw_dim(), &xr.raw_dim())?;
    let fx = f.features(&x.to_owned().insert_axis(Axis(0)));
    let fr = f.features(&xr.to_owned().insert_axis(Axis(0)));
    Ok(0.5 * Zip::from(&fx).and(&fr).fold(0.0, |a, &p, &q| a + (p.f64() - q.f64()).powi(2)))
}

/// A loss configuration bound to its feature map, evaluated over image batches.
pub struct Objective<'a, T: Real> {
    pub config: LossConfig,
    features: Option<&'a dyn FeatureMap<T>>,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(config: LossConfig, features: Option<&'a dyn FeatureMap<T>>) -> Result<Self> {
        config.validate()?;
        if config.kind == LossKind::Perceptual {
            let f = features.ok_or_else(|| Error::Config("perceptual loss needs a feature map".into()))?;
            if Some(f.id()) != config.feature_id.as_deref() {
                return Err(Error::Config(format!(
                    "feature map `{}` does not match loss.feature_id {:?}",
                    f.id(),
                    config.feature_id
                )));
            }
        }
        Ok(Self { config, features })
    }

    /// Mean per-pair loss and its gradient w.r.t. `output`.
    pub fn value_and_grad(&self, target: &Array4<T>, output: &Array4<T>) -> Result<(f64, Array4<T>)> {
        check_shapes(&target.raw_dim(), &output.raw_dim())?;
        let n = target.dim().0;
        if n == 0 {
            return Err(Error::Insufficient("empty batch".into()));
        }
        match self.config.kind {
            LossKind::Pixel => Ok(self.pixel_grad(target, output)),
            LossKind::Perceptual => {
                let f = self.features.expect("checked in new");
                let ft = f.features(target);
                let (fo, caches) = f.forward(output);
                let diff = &fo - &ft;
                let per: Vec<f64> = diff
                    .outer_iter()
                    .map(|d| 0.5 * d.iter().map(|v| v.f64() * v.f64()).sum::<f64>())
                    .collect();
                let g = diff.mapv(|v| v / T::c(n as f64));
                Ok((per.iter().sum::<f64>() / n as f64, f.backward(&caches, &g)))
            }
        }
    }

    pub fn value(&self, target: &Array4<T>, output: &Array4<T>) -> Result<f64> {
        Ok(self.value_and_grad(target, output)?.0)
    }

    fn pixel_grad(&self, target: &Array4<T>, output: &Array4<T>) -> (f64, Array4<T>) {
        let k = self.config.k;
        let n = target.dim().0;
        let m = target.len() / n;
        let w = if self.config.per_pixel_mean { 1.0 / m as f64 } else { 1.0 };
        let mut grad = Array4::zeros(output.raw_dim());
        let mut total = 0.0;
        for ((t, o), mut g) in target.outer_iter().zip(output.outer_iter()).zip(grad.outer_iter_mut()) {
            let s = w * power_sum(&t, &o, k);
            let loss = s.powf(1.0 / k);
            total += loss;
            if s == 0.0 {
                continue;
            }
            let scale = s.powf(1.0 / k - 1.0) * w / n as f64;
            Zip::from(&mut g).and(&t).and(&o).for_each(|g, &a, &b| {
                let d = b.f64() - a.f64();
                let mag = if k == 1.0 { 1.0 } else { d.abs().powf(k - 1.0) };
                *g = T::c(scale * mag * d.signum() * (d != 0.0) as u8 as f64);
            });
        }
        (total / n as f64, grad)
    }
}

/// Arithmetic mean of the per-pair losses of `(original, reconstruction)` pairs.
pub fn batch_loss<T: Real>(
    pairs: &[(ArrayView3<T>, ArrayView3<T>)],
    config: &LossConfig,
    features: Option<&dyn FeatureMap<T>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Insufficient("empty batch".into()));
    }
    let obj = Objective::new(config.clone(), features)?;
    let mut total = 0.0;
    for (x, xr) in pairs {
        check_shapes(&x.raw_dim(), &xr.raw_dim())?;
        let t = x.to_owned().insert_axis(Axis(0));
        let o = xr.to_owned().insert_axis(Axis(0));
        total += obj.value(&t, &o)?;
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, relative_error};
    use crate::nn::{Activation, Conv2d, Init, Layer};
    use ndarray::{arr1, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn pixel_examples() {
        let z = arr1(&[0.0f64, 0.0]);
        assert_eq!(pixel_loss(&arr1(&[1.0, 1.0]).view(), &z.view(), 1.0).unwrap(), 2.0);
        assert!((pixel_loss(&arr1(&[3.0, 4.0]).view(), &z.view(), 2.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(pixel_loss(&z.view(), &z.view(), 1.5).unwrap(), 0.0);
        assert!(pixel_loss(&z.view(), &z.view(), 0.5).is_err());
        assert!(pixel_loss(&z.view(), &arr1(&[0.0]).view(), 1.0).is_err());
        assert!((pixel_loss_mean(&arr1(&[1.0, 0.0]).view(), &z.view(), 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    fn small_net() -> Sequential<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, true, Init::Normal { std: 0.5 }, &mut rng)),
            Layer::Act(Activation::Tanh),
        ])
    }

    #[test]
    fn perceptual_identities() {
        let x = Array3::from_shape_fn((2, 4, 4), |(a, b, c)| ((a + b * 3 + c) as f64 * 0.37).sin());
        let y = Array3::from_shape_fn((2, 4, 4), |(a, b, c)| ((a * 2 + b + c * 5) as f64 * 0.21).cos());
        let f = SequentialFeatures::new("net", &small_net(), 2);
        assert_eq!(perceptual_loss(&x.view(), &x.view(), &f).unwrap(), 0.0);
        let ab = perceptual_loss(&x.view(), &y.view(), &f).unwrap();
        let ba = perceptual_loss(&y.view(), &x.view(), &f).unwrap();
        assert!((ab - ba).abs() < 1e-12 && ab > 0.0);
        let id = perceptual_loss(&x.view(), &y.view(), &IdentityFeatures).unwrap();
        let l2 = pixel_loss(&x.view(), &y.view(), 2.0).unwrap();
        assert!((id - 0.5 * l2 * l2).abs() < 1e-10);
    }

    #[test]
    fn batch_mean_of_pairs() {
        let cfg = LossConfig { per_pixel_mean: false, ..LossConfig::pixel(1.0) };
        let a = Array3::from_elem((1, 2, 2), 0.5f64);
        let b = Array3::zeros((1, 2, 2));
        let c = Array3::from_elem((1, 2, 2), -0.25);
        let one = batch_loss(&[(a.view(), b.view())], &cfg, None).unwrap();
        assert_eq!(one, 2.0);
        let two = batch_loss(&[(a.view(), b.view()), (c.view(), b.view())], &cfg, None).unwrap();
        assert_eq!(two, (2.0 + 1.0) / 2.0);
        assert_eq!(batch_loss(&[(a.view(), a.view())], &cfg, None).unwrap(), 0.0);
        assert!(batch_loss::<f64>(&[], &cfg, None).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let target = Array4::from_shape_fn((2, 2, 4, 4), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) as f64 * 0.41).sin());
        let out0 = Array4::from_shape_fn((2, 2, 4, 4), |(a, b, c, d)| ((3 * a + b + 2 * c + d) as f64 * 0.53).cos());
        let net = SequentialFeatures::new("net", &small_net(), 2);
        let configs = [
            (LossConfig::pixel(1.0), None),
            (LossConfig { per_pixel_mean: false, ..LossConfig::pixel(2.0) }, None),
            (LossConfig::pixel(3.0), None),
            (LossConfig::perceptual("net"), Some(&net as &dyn FeatureMap<f64>)),
        ];
        for (cfg, f) in configs {
            let obj = Objective::new(cfg.clone(), f).unwrap();
            let (_, g) = obj.value_and_grad(&target, &out0).unwrap();
            let mut flat: Vec<f64> = out0.iter().copied().collect();
            for idx in (0..flat.len()).step_by(5) {
                let num = central_difference(&mut flat, idx, 1e-6, |p| {
                    let o = Array4::from_shape_vec(out0.raw_dim(), p.to_vec()).unwrap();
                    obj.value(&target, &o).unwrap()
                });
                let ana = g.as_slice().unwrap()[idx];
                assert!(relative_error(ana, num) < 1e-5, "{cfg:?} idx {idx}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn perceptual_requires_matching_feature_map() {
        assert!(Objective::<f64>::new(LossConfig::perceptual("vgg"), None).is_err());
        assert!(Objective::<f64>::new(LossConfig::perceptual("vgg"), Some(&IdentityFeatures)).is_err());
        assert!(Objective::<f64>::new(LossConfig::perceptual("identity"), Some(&IdentityFeatures)).is_ok());
    }

    proptest! {
        #[test]
        fn pixel_loss_is_a_metric(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            c in proptest::collection::vec(-1.0f64..1.0, 6),
            k in 1.0f64..4.0,
        ) {
            let (a, b, c) = (arr1(&a), arr1(&b), arr1(&c));
            let ab = pixel_loss(&a.view(), &b.view(), k).unwrap();
            let ba = pixel_loss(&b.view(), &a.view(), k).unwrap();
            let ac = pixel_loss(&a.view(), &c.view(), k).unwrap();
            let cb = pixel_loss(&c.view(), &b.view(), k).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
