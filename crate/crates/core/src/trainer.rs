//! Reconstruction-network training.
//!
//! Training pairs `(f(x), x)` come from a [`TrainingStream`] that either draws
//! faces from a frozen generator (`x = r(z)`) or cycles through a raw image
//! set. Batch `i` of a stream is a pure function of the seed and `i`, which
//! makes resumed runs reproduce uninterrupted ones exactly.
//!
//! [`two_phase_train`] runs a pixel-loss phase from the random initialisation
//! and then refines with the perceptual loss. Optimizer moments and the
//! learning-rate schedule restart at the phase boundary.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Rotation};
use crate::data::FaceImage;
use crate::extractor::Extractor;
use crate::gan::GeneratorHandle;
use crate::losses::{FeatureMap, LossConfig, Objective};
use crate::nbnet::ReconstructionModel;
use crate::nn::{zeros_like, Adam, AdamState, Mode};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Generator,
    RawManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub lr0: f64,
    pub lr_decay: f64,
    /// Batches between learning-rate decays.
    pub decay_every: u64,
    pub phase1_batches: u64,
    pub phase2_batches: u64,
    /// Standard deviation of the normal weight initialisation.
    pub init_std: f64,
    pub seed: u64,
    pub data_source: DataSource,
    pub pixel_loss: LossConfig,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            beta1: 0.5,
            beta2: 0.999,
            lr0: 2e-4,
            lr_decay: 0.94,
            decay_every: 5000,
            phase1_batches: 300_000,
            phase2_batches: 100_000,
            init_std: 0.02,
            seed: 0,
            data_source: DataSource::Generator,
            pixel_loss: LossConfig::default(),
            checkpoint_every: 1000,
            keep_checkpoints: 3,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 2000 pixel-loss and 500 perceptual batches.
    pub fn desk() -> Self {
        Self { phase1_batches: 2000, phase2_batches: 500, checkpoint_every: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.decay_every == 0 {
            return bad("train.batch_size and train.decay_every must be positive");
        }
        if self.phase1_batches == 0 && self.phase2_batches == 0 {
            return bad("train.phase1_batches and train.phase2_batches are both zero");
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr0 must be positive and train.lr_decay in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        self.pixel_loss.validate()
    }
}

/// Step decay: `lr0 * lr_decay ^ floor(batch / decay_every)`.
pub fn lr_at(batch_index: u64, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi((batch_index / config.decay_every) as i32)
}

/// Where training images come from.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    Generator(&'a GeneratorHandle),
    Raw(&'a [FaceImage]),
}

/// Deterministic stream of `(templates, images)` batches.
pub struct TrainingStream<'a> {
    source: Source<'a>,
    extractor: &'a dyn Extractor,
    batch_size: usize,
    seed: u64,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

pub fn make_training_stream<'a>(
    source: Source<'a>,
    extractor: &'a dyn Extractor,
    batch_size: usize,
    seed: u64,
) -> Result<TrainingStream<'a>> {
    let want = extractor.handle().input_size;
    let size_err = |got: usize| Error::Shape {
        expected: format!("{want}x{want} images for extractor `{}`", extractor.handle().extractor_id),
        actual: format!("{got}x{got}"),
    };
    match source {
        Source::Generator(g) if g.image_size != want => return Err(size_err(g.image_size)),
        Source::Raw(faces) => {
            if faces.is_empty() {
                return Err(Error::Insufficient("raw training source is empty".into()));
            }
            if let Some(f) = faces.iter().find(|f| f.size() != want) {
                return Err(size_err(f.size()));
            }
        }
        _ => {}
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(TrainingStream { source, extractor, batch_size, seed, epoch_cache: None })
}

impl<'a> TrainingStream<'a> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn image_size(&self) -> usize {
        self.extractor.handle().input_size
    }

    fn epoch_order(&mut self, epoch: u64, n: usize) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    /// Indices into a raw source for batch `index`: consecutive slices of
    /// per-epoch shuffles, without replacement within an epoch.
    pub fn raw_indices(&mut self, index: u64, n: usize) -> Vec<usize> {
        let b = self.batch_size as u64;
        (0..b)
            .map(|j| {
                let pos = index * b + j;
                let (epoch, off) = (pos / n as u64, (pos % n as u64) as usize);
                self.epoch_order(epoch, n)[off]
            })
            .collect()
    }

    /// Images of batch `index`, before template extraction.
    pub fn images(&mut self, index: u64) -> Result<Array4<f32>> {
        match self.source {
            Source::Generator(g) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(index);
                let z = Array2::from_shape_simple_fn((self.batch_size, g.z_dim), || {
                    rand::Rng::gen_range(&mut rng, -1.0f32..=1.0)
                });
                Ok(g.generate(&z)?.mapv(|v| v.clamp(-1.0, 1.0)))
            }
            Source::Raw(faces) => {
                let idx = self.raw_indices(index, faces.len());
                let s = self.image_size();
                let mut out = Array4::zeros((idx.len(), 3, s, s));
                for (mut slot, &i) in out.outer_iter_mut().zip(&idx) {
                    slot.assign(&faces[i].pixels);
                }
                Ok(out)
            }
        }
    }

    /// Templates `(n, d)` and images `(n, 3, s, s)` of batch `index`.
    pub fn batch(&mut self, index: u64) -> Result<(Array2<f32>, Array4<f32>)> {
        let images = self.images(index)?;
        let templates = self.extractor.embed(&images)?;
        Ok((templates, images))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub phase: u8,
    /// Batch index within the phase; the learning rate is `lr_at(batch)`.
    pub batch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    phase: u8,
    batch: u64,
    adam_step: u64,
    loss: f64,
    config: TrainConfig,
}

/// Model, optimizer moments and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ReconstructionModel<f32>,
    adam: Adam<f32>,
    pub phase: u8,
    /// Batches completed in the current phase.
    pub batch: u64,
    pub last_loss: f64,
}

impl TrainState {
    pub fn new(model: ReconstructionModel<f32>, config: &TrainConfig) -> Self {
        Self { model, adam: Adam::new(config.beta1, config.beta2), phase: 1, batch: 0, last_loss: f64::NAN }
    }

    /// Moves to phase 2 from the current parameters with fresh optimizer moments.
    pub fn start_phase2(&mut self) {
        self.phase = 2;
        self.batch = 0;
        self.adam.reset();
    }

    pub fn adam_state(&self) -> &AdamState<f32> {
        self.adam.state()
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let meta = StateMeta {
            phase: self.phase,
            batch: self.batch,
            adam_step: self.adam.state().step,
            loss: self.last_loss,
            config: config.clone(),
        };
        self.model.to_checkpoint(serde_json::to_value(meta).expect("meta serializes"), &self.adam.state().to_tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let (model, extra_meta, tensors) = ReconstructionModel::from_checkpoint(ck)?;
        let meta: StateMeta = serde_json::from_value(extra_meta)
            .map_err(|e| Error::Checkpoint(format!("not a training-state checkpoint: {e}")))?;
        let mut adam = Adam::new(meta.config.beta1, meta.config.beta2);
        adam.set_state(AdamState::from_tensors(meta.adam_step, tensors));
        Ok((Self { model, adam, phase: meta.phase, batch: meta.batch, last_loss: meta.loss }, meta.config))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Stream index of the next batch: phase 2 continues after phase 1's batches.
    fn stream_index(&self, config: &TrainConfig) -> u64 {
        if self.phase == 1 {
            self.batch
        } else {
            config.phase1_batches + self.batch
        }
    }

    /// One optimizer step on the next batch of `stream`.
    pub fn step(&mut self, stream: &mut TrainingStream, objective: &Objective<f32>, config: &TrainConfig) -> Result<TrainLogEntry> {
        let (templates, images) = stream.batch(self.stream_index(config))?;
        let (out, cache) = self.model.forward(templates.view(), Mode::Train)?;
        let (loss, g) = objective.value_and_grad(&images, &out)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.batch, loss });
        }
        let mut grad = zeros_like(&self.model);
        self.model.backward(&cache, &g, Some(&mut grad));
        self.model.absorb(&cache);
        let lr = lr_at(self.batch, config);
        self.adam.step(&mut self.model, &grad, lr);
        let entry = TrainLogEntry { phase: self.phase, batch: self.batch, loss, lr, wall_ms: 0 };
        self.batch += 1;
        self.last_loss = loss;
        Ok(entry)
    }

    /// Runs the current phase until `total` batches, logging to
    /// `dir/train_log.jsonl` and checkpointing into `dir` when given.
    pub fn run_phase(
        &mut self,
        stream: &mut TrainingStream,
        objective: &Objective<f32>,
        config: &TrainConfig,
        total: u64,
        dir: Option<&Path>,
        mut on_step: impl FnMut(&TrainLogEntry),
    ) -> Result<Vec<TrainLogEntry>> {
        let mut rotation = dir.map(|d| Rotation::new(d, &format!("nbnet-p{}", self.phase), config.keep_checkpoints));
        let mut log_file = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(OpenOptions::new().create(true).append(true).open(d.join("train_log.jsonl"))?)
            }
            None => None,
        };
        let start = Instant::now();
        let mut entries = Vec::with_capacity(total.saturating_sub(self.batch) as usize);
        while self.batch < total {
            let mut e = self.step(stream, objective, config)?;
            e.wall_ms = start.elapsed().as_millis() as u64;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&e)?)?;
            }
            if let Some(rot) = rotation.as_mut() {
                if self.batch % config.checkpoint_every.max(1) == 0 || self.batch == total {
                    rot.save(&self.to_checkpoint(config), self.batch, e.loss)?;
                }
            }
            on_step(&e);
            entries.push(e);
        }
        Ok(entries)
    }
}

/// Single-phase training with `loss`, for `config.phase1_batches` batches.
pub fn train_nbnet(
    model: ReconstructionModel<f32>,
    stream: &mut TrainingStream,
    loss: &LossConfig,
    features: Option<&dyn FeatureMap<f32>>,
    config: &TrainConfig,
    dir: Option<&Path>,
) -> Result<(ReconstructionModel<f32>, Vec<TrainLogEntry>)> {
    config.validate()?;
    check_stream(&model, stream)?;
    let objective = Objective::new(loss.clone(), features)?;
    let mut state = TrainState::new(model, config);
    let log = state.run_phase(stream, &objective, config, config.phase1_batches, dir, |_| {})?;
    Ok((state.model, log))
}

fn check_stream(model: &ReconstructionModel<f32>, stream: &TrainingStream) -> Result<()> {
    let (d, s) = (stream.extractor.handle().output_dim, stream.image_size());
    if model.input_dim() != d || model.output_size() != s || model.spec.out_channels != 3 {
        return Err(Error::Shape {
            expected: format!("model mapping {}-D templates to 3x{1}x{1}", model.input_dim(), model.output_size()),
            actual: format!("stream of {d}-D templates and 3x{s}x{s} images"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TwoPhaseResult {
    pub model: ReconstructionModel<f32>,
    pub log: Vec<TrainLogEntry>,
    /// Parameter digest at the end of phase 1 (equal to the start of phase 2).
    pub phase1_digest: String,
}

/// Pixel-loss training followed by perceptual refinement with `features`.
pub fn two_phase_train(
    model: ReconstructionModel<f32>,
    stream: &mut TrainingStream,
    features: Option<&dyn FeatureMap<f32>>,
    config: &TrainConfig,
    dir: Option<&Path>,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<TwoPhaseResult> {
    config.validate()?;
    check_stream(&model, stream)?;
    let mut state = TrainState::new(model, config);
    resume_two_phase(&mut state, stream, features, config, dir, &mut on_step)
}

/// Continues a (possibly partially trained) two-phase run from `state`.
pub fn resume_two_phase(
    state: &mut TrainState,
    stream: &mut TrainingStream,
    features: Option<&dyn FeatureMap<f32>>,
    config: &TrainConfig,
    dir: Option<&Path>,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<TwoPhaseResult> {
    let mut log = Vec::new();
    if state.phase == 1 {
        let pixel = Objective::new(config.pixel_loss.clone(), None)?;
        log.extend(state.run_phase(stream, &pixel, config, config.phase1_batches, dir, &mut on_step)?);
    }
    let phase1_digest = crate::nn::digest(&state.model);
    if config.phase2_batches > 0 {
        let f = features.ok_or_else(|| Error::Config("phase 2 needs a perceptual feature map".into()))?;
        if state.phase == 1 {
            state.start_phase2();
        }
        let perceptual = Objective::new(LossConfig::perceptual(f.id()), Some(f))?;
        log.extend(state.run_phase(stream, &perceptual, config, config.phase2_batches, dir, &mut on_step)?);
    }
    Ok(TwoPhaseResult { model: state.model.clone(), log, phase1_digest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{train_stand_in_on_faces, CnnExtractor, ExtractorConfig};
    use crate::gan::{GanConfig, GanTrainer};
    use crate::nbnet::{build_network, desk_spec, Arch};
    use crate::nn::Init;
    use crate::synthetic::SyntheticFaces;

    fn setup() -> (Vec<FaceImage>, CnnExtractor) {
        let faces = SyntheticFaces::new(32, 4, 3, 2).generate();
        let cfg = ExtractorConfig { width: 4, output_dim: 16, steps: 3, ..Default::default() };
        let ex = train_stand_in_on_faces(&faces, &cfg, |_| {}).unwrap();
        (faces, ex)
    }

    fn model(seed: u64) -> ReconstructionModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_network(&desk_spec(Arch::NbnetA, 16), Init::Normal { std: 0.02 }, &mut rng).unwrap()
    }

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 2e-4);
        assert_eq!(lr_at(4999, &c), 2e-4);
        assert!((lr_at(10_000, &c) - 1.7672e-4).abs() < 1e-12);
    }

    #[test]
    fn raw_stream_epochs_cover_every_image() {
        let (faces, ex) = setup();
        let ten: Vec<FaceImage> = faces.into_iter().take(10).collect();
        let mut s = make_training_stream(Source::Raw(&ten), &ex, 4, 7).unwrap();
        let mut counts = [0usize; 10];
        for b in 0..8 {
            for i in s.raw_indices(b, 10) {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c >= 2), "{counts:?}");
        let first = s.raw_indices(0, 10);
        assert_eq!(first, make_training_stream(Source::Raw(&ten), &ex, 4, 7).unwrap().raw_indices(0, 10));
        let small = SyntheticFaces::new(16, 1, 1, 0).generate();
        assert!(make_training_stream(Source::Raw(&small), &ex, 4, 7).is_err());
    }

    #[test]
    fn generator_stream_is_reproducible() {
        let (_, ex) = setup();
        let g = GanTrainer::new(&GanConfig { z_dim: 8, ..Default::default() }).unwrap().generator();
        let a = make_training_stream(Source::Generator(&g), &ex, 3, 1).unwrap().batch(5).unwrap();
        let b = make_training_stream(Source::Generator(&g), &ex, 3, 1).unwrap().batch(5).unwrap();
        assert_eq!(a, b);
        let g16 = GanTrainer::new(&GanConfig { z_dim: 8, image_size: 16, ..Default::default() }).unwrap().generator();
        assert!(make_training_stream(Source::Generator(&g16), &ex, 3, 1).is_err());
    }

    #[test]
    fn resume_reproduces_trajectory_and_upstream_is_frozen() {
        let (faces, ex) = setup();
        let before = ex.digest();
        let cfg = TrainConfig { batch_size: 4, phase1_batches: 6, phase2_batches: 0, checkpoint_every: 3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        let full = two_phase_train(model(1), &mut s, None, &cfg, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(ex.digest(), before);
        assert_eq!(full.log.len(), 6);
        assert!(full.log.iter().all(|e| e.lr == lr_at(e.batch, &cfg)));

        let (mut state, cfg2) = TrainState::load(&dir.path().join("nbnet-p1-00000003.ckpt")).unwrap();
        assert_eq!(state.batch, 3);
        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        let tail = resume_two_phase(&mut state, &mut s, None, &cfg2, None, |_| {}).unwrap();
        let expected: Vec<f64> = full.log[3..].iter().map(|e| e.loss).collect();
        assert_eq!(tail.log.iter().map(|e| e.loss).collect::<Vec<_>>(), expected);
        assert_eq!(tail.model, full.model);
    }

    #[test]
    fn two_phase_handoff() {
        let (faces, ex) = setup();
        let f = ex.feature_map();
        let cfg = TrainConfig { batch_size: 4, phase1_batches: 3, phase2_batches: 2, ..Default::default() };
        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        let res = two_phase_train(model(1), &mut s, Some(&f), &cfg, None, |_| {}).unwrap();
        assert_eq!(res.log.iter().map(|e| (e.phase, e.batch)).collect::<Vec<_>>(), vec![(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)]);
        assert_eq!(res.log[3].lr, cfg.lr0);

        let only1 = TrainConfig { phase2_batches: 0, ..cfg.clone() };
        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        let p1 = two_phase_train(model(1), &mut s, None, &only1, None, |_| {}).unwrap();
        assert_eq!(p1.phase1_digest, res.phase1_digest);
        assert_eq!(crate::nn::digest(&p1.model), p1.phase1_digest);

        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        let other = two_phase_train(model(2), &mut s, None, &only1, None, |_| {}).unwrap();
        assert_ne!(other.phase1_digest, p1.phase1_digest);
        let none = TrainConfig { phase1_batches: 0, phase2_batches: 0, ..cfg };
        let mut s = make_training_stream(Source::Raw(&faces), &ex, 4, 3).unwrap();
        assert!(two_phase_train(model(1), &mut s, None, &none, None, |_| {}).is_err());
    }
}
