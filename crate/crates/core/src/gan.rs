//! Face generator `r(z)` for training-set augmentation: a DCGAN-style pair
//! with three changes to the usual recipe.
//!
//! * No batch-norm anywhere; every hidden layer uses SeLU instead of
//!   batch-norm plus ReLU / leaky ReLU.
//! * Soft targets: real images are labelled uniformly in `[0.7, 1.2]`,
//!   generated images in `[0, 0.3]`.
//! * Per iteration the discriminator takes one step on two batches (one real,
//!   one generated) while the generator takes one step on one batch, so the
//!   generator gets the larger learning rate.
//!
//! The generator mirrors the reconstruction network geometry: a 4x4 seed from
//! `z` followed by stride-2 4x4 de-convolutions, a 3x3 convolution and tanh.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Rotation};
use crate::data::FaceImage;
use crate::nn::{
    zeros_like, Activation, Adam, AdamState, Conv2d, ConvTranspose2d, Init, Layer, LayerKind, Linear, Mode,
    Parameterized, Sequential,
};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "gan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub z_dim: usize,
    pub image_size: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub real_label_range: [f64; 2],
    pub fake_label_range: [f64; 2],
    pub batch_size: usize,
    pub iterations: u64,
    /// Channels of the first generator block; halved per block, floored at 4.
    pub g_channels: usize,
    /// Channels of the first discriminator conv; doubled per conv.
    pub d_channels: usize,
    /// Standard deviation of the generator's normal weight initialisation;
    /// zero selects LeCun normal.
    pub g_init_std: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            z_dim: 100,
            image_size: 32,
            g_lr: 2e-4,
            d_lr: 5e-5,
            beta1: 0.5,
            beta2: 0.999,
            real_label_range: [0.7, 1.2],
            fake_label_range: [0.0, 0.3],
            batch_size: 64,
            iterations: 2000,
            g_channels: 64,
            d_channels: 32,
            g_init_std: 0.02,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let [rl, rh] = self.real_label_range;
        let [fl, fh] = self.fake_label_range;
        let bad = |m: String| Err(Error::Config(m));
        if self.z_dim == 0 || self.batch_size == 0 {
            return bad("gan.z_dim and gan.batch_size must be positive".into());
        }
        if self.base_size().is_none() {
            return bad(format!("gan.image_size must be 4 or 5 times a power of two (>= 8), got {}", self.image_size));
        }
        if !(rl <= rh && fl <= fh && (fh < rl || rh < fl)) {
            return bad("gan label ranges must be ordered and disjoint".into());
        }
        if !(self.g_lr > self.d_lr && self.d_lr > 0.0) {
            return bad(format!("gan.g_lr ({}) must exceed gan.d_lr ({}) > 0", self.g_lr, self.d_lr));
        }
        if self.g_channels == 0 || self.d_channels == 0 {
            return bad("gan channel widths must be positive".into());
        }
        if !(self.g_init_std >= 0.0 && self.g_init_std.is_finite()) {
            return bad(format!("gan.g_init_std must be finite and >= 0, got {}", self.g_init_std));
        }
        Ok(())
    }

    /// Side of the first generator feature map: `image_size = base * 2^n`, `n >= 1`.
    pub fn base_size(&self) -> Option<usize> {
        let mut s = self.image_size;
        while s > 5 && s % 2 == 0 {
            s /= 2;
        }
        (matches!(s, 4 | 5) && s < self.image_size).then_some(s)
    }

    fn upsampling_blocks(&self) -> usize {
        let base = self.base_size().unwrap_or(4);
        (self.image_size / base).trailing_zeros() as usize + 1
    }
}

/// `n` vectors drawn i.i.d. from the uniform distribution on `[-1, 1]^z_dim`.
pub fn sample_z(n: usize, z_dim: usize, seed: u64) -> Result<Array2<f32>> {
    if n == 0 || z_dim == 0 {
        return Err(Error::OutOfRange("sample_z needs n >= 1 and z_dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(uniform_z(n, z_dim, &mut rng))
}

fn uniform_z<R: Rng + ?Sized>(n: usize, z_dim: usize, rng: &mut R) -> Array2<f32> {
    Array2::from_shape_simple_fn((n, z_dim), || rng.gen_range(-1.0f32..=1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Real,
    Fake,
}

/// Soft training targets with the default ranges.
pub fn soft_labels(n: usize, kind: LabelKind, seed: u64) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(Error::OutOfRange("soft_labels needs n >= 1".into()));
    }
    let cfg = GanConfig::default();
    Ok(draw_labels(n, label_range(&cfg, kind), &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn label_range(cfg: &GanConfig, kind: LabelKind) -> [f64; 2] {
    match kind {
        LabelKind::Real => cfg.real_label_range,
        LabelKind::Fake => cfg.fake_label_range,
    }
}

fn draw_labels<R: Rng + ?Sized>(n: usize, [lo, hi]: [f64; 2], rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..=hi) as f32).collect()
}

fn generator_network<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Sequential<f32> {
    let init = if cfg.g_init_std > 0.0 { Init::Normal { std: cfg.g_init_std } } else { Init::LecunNormal };
    let mut layers = Vec::new();
    let mut c_in = cfg.z_dim;
    for d in 0..cfg.upsampling_blocks() {
        let c = (cfg.g_channels >> d).max(4);
        let (k, stride, pad) = if d == 0 { (cfg.base_size().unwrap_or(4), 1, 0) } else { (4, 2, 1) };
        layers.push(Layer::Deconv(ConvTranspose2d::new(c_in, c, k, stride, pad, 0, true, init, rng)));
        layers.push(Layer::Act(Activation::Selu));
        c_in = c;
    }
    layers.push(Layer::Conv(Conv2d::new(c_in, 3, 3, 1, 1, true, init, rng)));
    layers.push(Layer::Act(Activation::Tanh));
    Sequential::new(layers)
}

fn discriminator_network<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Sequential<f32> {
    let init = Init::LecunNormal;
    let mut layers = Vec::new();
    let (mut c_in, mut size, mut c) = (3, cfg.image_size, cfg.d_channels);
    let base = cfg.base_size().unwrap_or(4);
    while size > base {
        layers.push(Layer::Conv(Conv2d::new(c_in, c, 4, 2, 1, true, init, rng)));
        layers.push(Layer::Act(Activation::Selu));
        c_in = c;
        c *= 2;
        size /= 2;
    }
    layers.push(Layer::Linear(Linear::new(c_in * size * size, 1, true, init, rng)));
    Sequential::new(layers)
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy with logits against (possibly soft) targets,
/// and its gradient w.r.t. the logits.
fn bce_with_logits(logits: &Array4<f32>, targets: &[f32]) -> (f64, Array4<f32>) {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for ((l, g), &t) in logits.iter().zip(grad.iter_mut()).zip(targets) {
        let (l, t) = (*l as f64, t as f64);
        loss += softplus(l) - t * l;
        *g = ((sigmoid(l) - t) / n) as f32;
    }
    (loss / n, grad)
}

/// A frozen generator `r(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorHandle {
    net: Sequential<f32>,
    pub z_dim: usize,
    pub image_size: usize,
}

impl GeneratorHandle {
    /// Images in `[-1, 1]` for each row of `z`.
    pub fn generate(&self, z: &Array2<f32>) -> Result<Array4<f32>> {
        let (n, d) = z.dim();
        if d != self.z_dim {
            return Err(Error::Shape { expected: format!("z dimension {}", self.z_dim), actual: format!("{d}") });
        }
        let x = z.as_standard_layout().to_owned().into_shape_with_order((n, d, 1, 1)).expect("z rows");
        Ok(self.net.forward(&x, Mode::Eval).0)
    }

    pub fn generate_faces(&self, z: &Array2<f32>, prefix: &str) -> Result<Vec<FaceImage>> {
        let imgs = self.generate(z)?;
        imgs.outer_iter()
            .enumerate()
            .map(|(i, img)| FaceImage::new(img.mapv(|v| v.clamp(-1.0, 1.0)), format!("{prefix}{i:05}"), "gen"))
            .collect()
    }

    pub fn digest(&self) -> String {
        crate::nn::digest(&self.net)
    }

    pub fn network(&self) -> &Sequential<f32> {
        &self.net
    }

    /// Loads the generator half of a GAN checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(GanTrainer::load(path)?.generator())
    }
}

/// Generator and discriminator, visited in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gan {
    pub generator: Sequential<f32>,
    pub discriminator: Sequential<f32>,
}

impl Parameterized<f32> for Gan {
    fn visit_params(&self, f: &mut dyn FnMut(&[f32])) {
        self.generator.visit_params(f);
        self.discriminator.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        self.generator.visit_params_mut(f);
        self.discriminator.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogEntry {
    pub iter: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    /// Cumulative images shown to the generator and to the discriminator.
    pub g_samples: u64,
    pub d_samples: u64,
    pub wall_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    config: GanConfig,
    iter: u64,
    g_samples: u64,
    d_samples: u64,
    g_layers: Vec<LayerKind>,
    d_layers: Vec<LayerKind>,
    g_adam_step: u64,
    d_adam_step: u64,
    last_g_loss: f64,
    last_d_loss: f64,
}

/// Resumable GAN training state.
#[derive(Clone, Debug)]
pub struct GanTrainer {
    pub config: GanConfig,
    pub gan: Gan,
    adam_g: Adam<f32>,
    adam_d: Adam<f32>,
    pub iter: u64,
    pub g_samples: u64,
    pub d_samples: u64,
    last: (f64, f64),
}

impl GanTrainer {
    pub fn new(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gan = Gan { generator: generator_network(config, &mut rng), discriminator: discriminator_network(config, &mut rng) };
        Ok(Self {
            config: config.clone(),
            gan,
            adam_g: Adam::new(config.beta1, config.beta2),
            adam_d: Adam::new(config.beta1, config.beta2),
            iter: 0,
            g_samples: 0,
            d_samples: 0,
            last: (f64::NAN, f64::NAN),
        })
    }

    pub fn generator(&self) -> GeneratorHandle {
        GeneratorHandle { net: self.gan.generator.clone(), z_dim: self.config.z_dim, image_size: self.config.image_size }
    }

    /// One iteration: a discriminator step on a real and a generated batch,
    /// then a generator step on the generated batch.
    pub fn step(&mut self, data: &[FaceImage]) -> Result<GanLogEntry> {
        let cfg = &self.config;
        let b = cfg.batch_size;
        let s = cfg.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.iter + 1);
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let mut real = Array4::<f32>::zeros((b, 3, s, s));
        for (mut slot, &i) in real.outer_iter_mut().zip(&picks) {
            slot.assign(&data[i].pixels);
        }
        let z = uniform_z(b, cfg.z_dim, &mut rng).into_shape_with_order((b, cfg.z_dim, 1, 1)).expect("z");
        let real_t = draw_labels(b, cfg.real_label_range, &mut rng);
        let fake_t = draw_labels(b, cfg.fake_label_range, &mut rng);

        let g = &self.gan.generator;
        let d = &self.gan.discriminator;
        let (fake, g_cache) = g.forward(&z, Mode::Train);

        let mut gd = zeros_like(d);
        let (lr_out, c) = d.forward(&real, Mode::Train);
        let (loss_r, gl) = bce_with_logits(&lr_out, &real_t);
        d.backward(&c, &gl, Some(&mut gd));
        let (lf_out, c) = d.forward(&fake, Mode::Train);
        let (loss_f, gl) = bce_with_logits(&lf_out, &fake_t);
        d.backward(&c, &gl, Some(&mut gd));
        let d_loss = loss_r + loss_f;
        if !d_loss.is_finite() {
            return Err(Error::Diverged { step: self.iter, loss: d_loss });
        }
        self.adam_d.step(&mut self.gan.discriminator, &gd, cfg.d_lr);

        let d = &self.gan.discriminator;
        let ones = vec![1.0f32; b];
        let (lg_out, c) = d.forward(&fake, Mode::Train);
        let (g_loss, gl) = bce_with_logits(&lg_out, &ones);
        if !g_loss.is_finite() {
            return Err(Error::Diverged { step: self.iter, loss: g_loss });
        }
        let gx = d.backward(&c, &gl, None);
        let mut gg = zeros_like(g);
        g.backward(&g_cache, &gx, Some(&mut gg));
        self.adam_g.step(&mut self.gan.generator, &gg, cfg.g_lr);
        self.iter += 1;
        self.g_samples += b as u64;
        self.d_samples += 2 * b as u64;
        self.last = (g_loss, d_loss);
        Ok(GanLogEntry { iter: self.iter, g_loss, d_loss, g_samples: self.g_samples, d_samples: self.d_samples, wall_ms: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = GanMeta {
            config: self.config.clone(),
            iter: self.iter,
            g_samples: self.g_samples,
            d_samples: self.d_samples,
            g_layers: self.gan.generator.kinds(),
            d_layers: self.gan.discriminator.kinds(),
            g_adam_step: self.adam_g.state().step,
            d_adam_step: self.adam_d.state().step,
            last_g_loss: self.last.0,
            last_d_loss: self.last.1,
        };
        let mut extra = self.adam_g.state().to_tensors();
        let n_g = extra.len();
        extra.extend(self.adam_d.state().to_tensors());
        let mut meta = serde_json::to_value(meta).expect("meta serializes");
        meta["g_moment_tensors"] = n_g.into();
        Checkpoint::build(CHECKPOINT_KIND, meta, &self.gan, &extra)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: GanMeta = ck.meta()?;
        let n_g = ck.header.meta["g_moment_tensors"].as_u64().unwrap_or(0) as usize;
        let mut gan = Gan {
            generator: Sequential::from_kinds(&meta.g_layers),
            discriminator: Sequential::from_kinds(&meta.d_layers),
        };
        let mut extra = ck.restore(&mut gan)?;
        let d_moments = extra.split_off(n_g.min(extra.len()));
        let mut adam_g = Adam::new(meta.config.beta1, meta.config.beta2);
        let mut adam_d = Adam::new(meta.config.beta1, meta.config.beta2);
        adam_g.set_state(AdamState::from_tensors(meta.g_adam_step, extra));
        adam_d.set_state(AdamState::from_tensors(meta.d_adam_step, d_moments));
        Ok(Self {
            config: meta.config,
            gan,
            adam_g,
            adam_d,
            iter: meta.iter,
            g_samples: meta.g_samples,
            d_samples: meta.d_samples,
            last: (meta.last_g_loss, meta.last_d_loss),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Trains until `config.iterations`, appending to `dir/gan_log.jsonl` and
    /// checkpointing into `dir` when a directory is given.
    pub fn run(&mut self, data: &[FaceImage], dir: Option<&Path>, mut on_step: impl FnMut(&GanLogEntry)) -> Result<Vec<GanLogEntry>> {
        if data.is_empty() {
            return Err(Error::Insufficient("GAN training needs a non-empty dataset".into()));
        }
        if let Some(bad) = data.iter().find(|f| f.size() != self.config.image_size) {
            return Err(Error::Shape {
                expected: format!("{0}x{0} images", self.config.image_size),
                actual: format!("{0}x{0} ({1}/{2})", bad.size(), bad.subject_id, bad.sample_id),
            });
        }
        let mut rotation = dir.map(|d| Rotation::new(d, "gan", 3));
        let mut log_file = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(OpenOptions::new().create(true).append(true).open(d.join("gan_log.jsonl"))?)
            }
            None => None,
        };
        let start = Instant::now();
        let mut entries = Vec::new();
        while self.iter < self.config.iterations {
            let mut e = self.step(data)?;
            e.wall_ms = start.elapsed().as_millis() as u64;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&e)?)?;
            }
            if let Some(rot) = rotation.as_mut() {
                let every = self.config.checkpoint_every.max(1);
                if self.iter % every == 0 || self.iter == self.config.iterations {
                    rot.save(&self.to_checkpoint(), self.iter, e.g_loss + e.d_loss)?;
                }
            }
            on_step(&e);
            entries.push(e);
        }
        Ok(entries)
    }
}

/// Trains a GAN from scratch on `dataset` and returns the frozen generator.
pub fn train_gan(dataset: &[FaceImage], config: &GanConfig, dir: Option<&Path>) -> Result<(GeneratorHandle, Vec<GanLogEntry>)> {
    let mut trainer = GanTrainer::new(config)?;
    let log = trainer.run(dataset, dir, |_| {})?;
    Ok((trainer.generator(), log))
}

/// Structural check: no batch-norm layer in either network.
pub fn has_batch_norm(net: &Sequential<f32>) -> bool {
    net.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
}

/// Mean pairwise L2 distance between the images of a batch.
pub fn mean_pairwise_distance(images: &Array4<f32>) -> f64 {
    let n = images.dim().0;
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = images.index_axis(Axis(0), i);
            let b = images.index_axis(Axis(0), j);
            acc += ndarray::Zip::from(&a).and(&b).fold(0.0f64, |s, &x, &y| s + ((x - y) as f64).powi(2)).sqrt();
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticFaces;

    fn tiny() -> GanConfig {
        GanConfig { image_size: 8, z_dim: 6, batch_size: 4, g_channels: 8, d_channels: 4, iterations: 6, checkpoint_every: 2, ..Default::default() }
    }

    #[test]
    fn z_and_labels() {
        let a = sample_z(3, 100, 9).unwrap();
        assert_eq!(a, sample_z(3, 100, 9).unwrap());
        assert!(sample_z(0, 100, 9).is_err());
        let big = sample_z(100_000, 2, 1).unwrap();
        for col in big.columns() {
            assert!(col.mean().unwrap().abs() < 0.02);
            assert!(col.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let r = soft_labels(1000, LabelKind::Real, 3).unwrap();
        assert!(r.iter().all(|v| (0.7..=1.2).contains(v)));
        let f = soft_labels(1000, LabelKind::Fake, 3).unwrap();
        assert!(f.iter().all(|v| (0.0..=0.3).contains(v)));
        assert_eq!(f, soft_labels(1000, LabelKind::Fake, 3).unwrap());
    }

    #[test]
    fn bce_gradient_matches_difference() {
        let l = Array4::from_shape_vec((3, 1, 1, 1), vec![-2.0f32, 0.3, 4.0]).unwrap();
        let t = [0.1f32, 1.1, 0.8];
        let (_, g) = bce_with_logits(&l, &t);
        for i in 0..3 {
            let mut p = l.clone();
            p[[i, 0, 0, 0]] += 1e-3;
            let mut m = l.clone();
            m[[i, 0, 0, 0]] -= 1e-3;
            let num = (bce_with_logits(&p, &t).0 - bce_with_logits(&m, &t).0) / 2e-3;
            assert!((num - g[[i, 0, 0, 0]] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn architecture_and_shapes() {
        let t = GanTrainer::new(&GanConfig::default()).unwrap();
        assert!(!has_batch_norm(&t.gan.generator) && !has_batch_norm(&t.gan.discriminator));
        let g = t.generator();
        let imgs = g.generate(&sample_z(64, 100, 0).unwrap()).unwrap();
        assert_eq!(imgs.dim(), (64, 3, 32, 32));
        assert!(imgs.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(g.generate(&sample_z(2, 99, 0).unwrap()).is_err());
        let bad = GanConfig { g_lr: 1e-5, ..Default::default() };
        assert!(GanTrainer::new(&bad).is_err());
        for (size, base) in [(8, Some(4)), (160, Some(5)), (10, Some(5)), (12, None), (4, None), (48, None)] {
            assert_eq!(GanConfig { image_size: size, ..Default::default() }.base_size(), base, "{size}");
        }
        let wide = GanConfig { image_size: 40, g_channels: 8, d_channels: 4, z_dim: 6, ..Default::default() };
        let t = GanTrainer::new(&wide).unwrap();
        assert_eq!(t.generator().generate(&sample_z(2, 6, 0).unwrap()).unwrap().dim(), (2, 3, 40, 40));
    }

    #[test]
    fn training_resumes_exactly() {
        let data = SyntheticFaces::new(8, 3, 2, 1).generate();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let mut full = GanTrainer::new(&cfg).unwrap();
        let log = full.run(&data, None, |_| {}).unwrap();
        assert_eq!(log.len(), 6);
        assert!(log.iter().all(|e| e.d_loss.is_finite() && e.d_samples == 2 * e.g_samples));

        let mut first = GanTrainer::new(&GanConfig { iterations: 4, ..cfg.clone() }).unwrap();
        first.run(&data, Some(dir.path()), |_| {}).unwrap();
        let mut resumed = GanTrainer::load(&dir.path().join("gan-00000004.ckpt")).unwrap();
        assert_eq!(resumed.iter, 4);
        resumed.config.iterations = 6;
        let tail = resumed.run(&data, None, |_| {}).unwrap();
        assert_eq!(tail.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![5, 6]);
        assert_eq!(tail[1].g_loss, log[5].g_loss);
        assert_eq!(resumed.gan, full.gan);
        let lines = std::fs::read_to_string(dir.path().join("gan_log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        assert!(train_gan(&[], &cfg, None).is_err());
    }
}
