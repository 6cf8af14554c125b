//! Black-box template extractors.
//!
//! Downstream code sees an extractor only through [`Extractor`]: metadata, a
//! pixels-to-template map and cosine similarity. No gradients or internals
//! are exposed. Two implementations ship here:
//!
//! * [`CnnExtractor`], a small convolutional embedding network trained with a
//!   pairwise contrastive objective on cosine similarities;
//! * [`EmbeddingFileExtractor`], which looks up precomputed templates by
//!   `(subject_id, sample_id)` from a JSON Lines file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_faces, FaceImage, ImageManifest};
use crate::losses::SequentialFeatures;
use crate::nn::{
    zeros_like, Activation, Adam, BatchNorm2d, Conv2d, Init, Layer, LayerKind, Linear, Mode, Sequential,
};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "extractor";

/// A fixed-length embedding of one face image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub vector: Vec<f32>,
    pub subject_id: String,
    pub sample_id: String,
    pub extractor_id: String,
}

impl Template {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two raw vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: format!("dimension {}", a.len()), actual: format!("{}", b.len()) });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of two templates from the same extractor.
pub fn similarity(a: &Template, b: &Template) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::ExtractorMismatch(format!("`{}` vs `{}`", a.extractor_id, b.extractor_id)));
    }
    cosine(&a.vector, &b.vector)
}

/// Public metadata of an extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorHandle {
    pub extractor_id: String,
    pub output_dim: usize,
    /// Side of the square input images, in pixels.
    pub input_size: usize,
    pub unit_norm: bool,
}

/// The black-box template extractor `f(x)`.
pub trait Extractor: Send + Sync {
    fn handle(&self) -> &ExtractorHandle;

    /// Templates for a batch of `(n, 3, s, s)` images, one row per image.
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>>;

    fn check_size(&self, size: usize) -> Result<()> {
        let want = self.handle().input_size;
        if size != want {
            return Err(Error::Shape { expected: format!("{want}x{want} input"), actual: format!("{size}x{size}") });
        }
        Ok(())
    }

    fn extract(&self, image: &FaceImage) -> Result<Template> {
        Ok(self.extract_all(std::slice::from_ref(image))?.remove(0))
    }

    fn extract_all(&self, images: &[FaceImage]) -> Result<Vec<Template>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for img in chunk {
                self.check_size(img.size())?;
            }
            let batch = stack_faces(chunk);
            let rows = self.embed(&batch)?;
            for (img, row) in chunk.iter().zip(rows.outer_iter()) {
                out.push(Template {
                    vector: row.to_vec(),
                    subject_id: img.subject_id.clone(),
                    sample_id: img.sample_id.clone(),
                    extractor_id: self.handle().extractor_id.clone(),
                });
            }
        }
        Ok(out)
    }
}

/// Stacks template vectors into an `(n, d)` matrix.
pub fn stack_templates(ts: &[Template]) -> Array2<f32> {
    let d = ts.first().map_or(0, Template::dim);
    Array2::from_shape_fn((ts.len(), d), |(i, j)| ts[i].vector[j])
}

/// Stacks face images into an `(n, 3, s, s)` batch.
pub fn stack_faces(faces: &[FaceImage]) -> Array4<f32> {
    let views: Vec<_> = faces.iter().map(|f| f.pixels.view()).collect();
    ndarray::stack(Axis(0), &views).expect("faces share one shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub extractor_id: String,
    pub output_dim: usize,
    pub input_size: usize,
    /// Channels of the first conv stage; later stages use 2x, 4x and 4x.
    pub width: usize,
    /// Identities per batch (`P`) and samples per identity (`K`).
    pub subjects_per_batch: usize,
    pub samples_per_subject: usize,
    pub steps: usize,
    pub lr: f64,
    /// Impostor pairs are penalised only above this cosine similarity.
    pub margin: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            extractor_id: "stand-in".into(),
            output_dim: 128,
            input_size: 32,
            width: 16,
            subjects_per_batch: 8,
            samples_per_subject: 4,
            steps: 600,
            lr: 1e-3,
            margin: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorLogEntry {
    pub step: usize,
    pub loss: f64,
    pub genuine_mean: f64,
    pub impostor_mean: f64,
    pub wall_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct CnnMeta {
    handle: ExtractorHandle,
    layers: Vec<LayerKind>,
    feature_depth: usize,
    objective: String,
    config: ExtractorConfig,
}

/// Convolutional stand-in extractor: four conv stages, global average
/// pooling, a linear head and L2 normalisation.
#[derive(Clone, Debug)]
pub struct CnnExtractor {
    handle: ExtractorHandle,
    net: Sequential<f32>,
    feature_depth: usize,
    config: ExtractorConfig,
}

const OBJECTIVE: &str = "pairwise contrastive on cosine similarity: mean(1 - s) over genuine pairs + mean(max(0, s - margin)) over impostor pairs";

fn stand_in_network<R: Rng + ?Sized>(cfg: &ExtractorConfig, rng: &mut R) -> (Sequential<f32>, usize) {
    let w = cfg.width;
    let he = |fan_in: usize| Init::Normal { std: (2.0 / fan_in as f64).sqrt() };
    let mut layers = Vec::new();
    let stage = |layers: &mut Vec<Layer<f32>>, c_in: usize, c_out: usize, stride: usize, rng: &mut R| {
        layers.push(Layer::Conv(Conv2d::new(c_in, c_out, 3, stride, 1, false, he(c_in * 9), rng)));
        layers.push(Layer::BatchNorm(BatchNorm2d::new(c_out, true)));
        layers.push(Layer::Act(Activation::Relu));
    };
    stage(&mut layers, 3, w, 1, rng);
    stage(&mut layers, w, 2 * w, 2, rng);
    let feature_depth = layers.len();
    stage(&mut layers, 2 * w, 4 * w, 2, rng);
    stage(&mut layers, 4 * w, 4 * w, 2, rng);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new(4 * w, cfg.output_dim, true, Init::LecunNormal, rng)));
    layers.push(Layer::L2Normalize);
    (Sequential::new(layers), feature_depth)
}

/// Contrastive loss over a `P x K` batch and its gradient w.r.t. the unit embeddings.
fn contrastive(emb: &Array2<f32>, labels: &[usize], margin: f64) -> (f64, Array2<f32>, f64, f64) {
    let e = emb.mapv(|v| v as f64);
    let sim = e.dot(&e.t());
    let n = labels.len();
    let (mut npos, mut nneg) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if labels[i] == labels[j] {
                    npos += 1;
                } else {
                    nneg += 1;
                }
            }
        }
    }
    let mut gs = Array2::<f64>::zeros((n, n));
    let (mut loss, mut gen, mut imp) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = sim[[i, j]];
            if labels[i] == labels[j] {
                loss += (1.0 - s) / npos as f64;
                gen += s / npos as f64;
                gs[[i, j]] = -1.0 / npos as f64;
            } else {
                imp += s / nneg.max(1) as f64;
                if s > margin {
                    loss += (s - margin) / nneg as f64;
                    gs[[i, j]] = 1.0 / nneg as f64;
                }
            }
        }
    }
    let ge = (&gs + &gs.t()).dot(&e);
    (loss, ge.mapv(|v| v as f32), gen, imp)
}

impl CnnExtractor {
    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// A frozen copy of the mid-depth activation (end of the second conv stage),
    /// for use as a perceptual feature map.
    pub fn feature_map(&self) -> SequentialFeatures<f32> {
        SequentialFeatures::new(format!("{}/stage2", self.handle.extractor_id), &self.net, self.feature_depth)
    }

    pub fn feature_id(&self) -> String {
        format!("{}/stage2", self.handle.extractor_id)
    }

    /// SHA-256 over parameters and running statistics.
    pub fn digest(&self) -> String {
        crate::nn::digest(&self.net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CnnMeta {
            handle: self.handle.clone(),
            layers: self.net.kinds(),
            feature_depth: self.feature_depth,
            objective: OBJECTIVE.into(),
            config: self.config.clone(),
        };
        Checkpoint::build(CHECKPOINT_KIND, serde_json::to_value(meta)?, &self.net, &[]).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: CnnMeta = ck.meta()?;
        let mut net = Sequential::from_kinds(&meta.layers);
        ck.restore(&mut net)?;
        Ok(Self { handle: meta.handle, net, feature_depth: meta.feature_depth, config: meta.config })
    }
}

impl Extractor for CnnExtractor {
    fn handle(&self) -> &ExtractorHandle {
        &self.handle
    }

    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let (n, c, h, w) = images.dim();
        if c != 3 || h != w {
            return Err(Error::Shape { expected: "(n, 3, s, s)".into(), actual: format!("({n}, {c}, {h}, {w})") });
        }
        self.check_size(h)?;
        let (y, _) = self.net.forward(images, Mode::Eval);
        Ok(y.into_shape_with_order((n, self.handle.output_dim)).expect("embedding rows"))
    }
}

/// Trains the stand-in extractor on `faces` and freezes it.
///
/// `log` receives one entry per step.
pub fn train_stand_in_on_faces(
    faces: &[FaceImage],
    config: &ExtractorConfig,
    mut log: impl FnMut(&ExtractorLogEntry),
) -> Result<CnnExtractor> {
    if config.output_dim < 2 {
        return Err(Error::Config(format!("output_dim must be at least 2, got {}", config.output_dim)));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in faces.iter().enumerate() {
        if f.size() != config.input_size {
            return Err(Error::Shape {
                expected: format!("{0}x{0} training images", config.input_size),
                actual: format!("{0}x{0}", f.size()),
            });
        }
        by_subject.entry(f.subject_id.as_str()).or_default().push(i);
    }
    let usable: Vec<&Vec<usize>> = by_subject.values().filter(|v| v.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::Insufficient(format!(
            "extractor training needs at least 2 subjects with 2 samples each, found {}",
            usable.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut net, feature_depth) = stand_in_network(config, &mut rng);
    let mut adam = Adam::new(0.9, 0.999);
    let p = config.subjects_per_batch.clamp(2, usable.len());
    let k = config.samples_per_subject.max(2);
    let start = Instant::now();
    for step in 0..config.steps {
        let chosen: Vec<&&Vec<usize>> = usable.choose_multiple(&mut rng, p).collect();
        let mut idx = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for (label, members) in chosen.iter().enumerate() {
            let mut pool: Vec<usize> = members.to_vec();
            pool.shuffle(&mut rng);
            for j in 0..k {
                idx.push(pool[j % pool.len()]);
                labels.push(label);
            }
        }
        let batch = Array4::from_shape_fn((idx.len(), 3, config.input_size, config.input_size), |(b, c, y, x)| {
            faces[idx[b]].pixels[[c, y, x]]
        });
        let (y, caches) = net.forward(&batch, Mode::Train);
        let emb = y.into_shape_with_order((idx.len(), config.output_dim)).expect("rows");
        let (loss, ge, gen, imp) = contrastive(&emb, &labels, config.margin);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as u64, loss });
        }
        let gy = ge.into_shape_with_order((idx.len(), config.output_dim, 1, 1)).expect("grad rows");
        let mut grad = zeros_like(&net);
        net.backward(&caches, &gy, Some(&mut grad));
        net.absorb(&caches);
        adam.step(&mut net, &grad, config.lr);
        log(&ExtractorLogEntry {
            step,
            loss,
            genuine_mean: gen,
            impostor_mean: imp,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(CnnExtractor {
        handle: ExtractorHandle {
            extractor_id: config.extractor_id.clone(),
            output_dim: config.output_dim,
            input_size: config.input_size,
            unit_norm: true,
        },
        net,
        feature_depth,
        config: config.clone(),
    })
}

/// Loads the images of `train_set` and trains the stand-in extractor on them.
pub fn train_stand_in_extractor(train_set: &ImageManifest, config: &ExtractorConfig) -> Result<CnnExtractor> {
    let faces = load_faces(train_set, config.input_size)?;
    train_stand_in_on_faces(&faces, config, |_| {})
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    subject_id: String,
    sample_id: String,
    vector: Vec<f32>,
}

/// Precomputed templates keyed by `(subject_id, sample_id)`.
///
/// Lookups ignore pixels, so this extractor cannot embed images it has no
/// record for (including generated ones).
#[derive(Clone, Debug)]
pub struct EmbeddingFileExtractor {
    handle: ExtractorHandle,
    table: HashMap<(String, String), Vec<f32>>,
}

impl EmbeddingFileExtractor {
    pub fn load(path: &Path, extractor_id: &str, input_size: usize) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut table = HashMap::new();
        let mut dim = None;
        let mut unit = true;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let d = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != d || d < 2 {
                return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("vector length {} (expected {d} >= 2)", rec.vector.len()) });
            }
            let norm = rec.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            unit &= (norm - 1.0).abs() <= 1e-4;
            if table.insert((rec.subject_id.clone(), rec.sample_id.clone()), rec.vector).is_some() {
                return Err(Error::DuplicateIdentity { subject_id: rec.subject_id, sample_id: rec.sample_id });
            }
        }
        let output_dim = dim.ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 0, msg: "no embeddings".into() })?;
        Ok(Self {
            handle: ExtractorHandle { extractor_id: extractor_id.into(), output_dim, input_size, unit_norm: unit },
            table,
        })
    }
}

impl Extractor for EmbeddingFileExtractor {
    fn handle(&self) -> &ExtractorHandle {
        &self.handle
    }

    fn embed(&self, _images: &Array4<f32>) -> Result<Array2<f32>> {
        Err(Error::Config(format!(
            "extractor `{}` only serves precomputed templates and cannot embed raw pixels",
            self.handle.extractor_id
        )))
    }

    fn extract_all(&self, images: &[FaceImage]) -> Result<Vec<Template>> {
        images
            .iter()
            .map(|img| {
                let key = (img.subject_id.clone(), img.sample_id.clone());
                let vector = self.table.get(&key).cloned().ok_or_else(|| {
                    Error::Config(format!("no embedding for ({}, {})", img.subject_id, img.sample_id))
                })?;
                Ok(Template {
                    vector,
                    subject_id: key.0,
                    sample_id: key.1,
                    extractor_id: self.handle.extractor_id.clone(),
                })
            })
            .collect()
    }
}

/// Mean genuine and impostor cosine similarity over all pairs of `templates`.
pub fn genuine_impostor_means(templates: &[Template]) -> Result<(f64, f64)> {
    let (mut g, mut ng, mut i, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..templates.len() {
        for b in a + 1..templates.len() {
            let s = similarity(&templates[a], &templates[b])?;
            if templates[a].subject_id == templates[b].subject_id {
                g += s;
                ng += 1;
            } else {
                i += s;
                ni += 1;
            }
        }
    }
    if ng == 0 || ni == 0 {
        return Err(Error::Insufficient("need both genuine and impostor pairs".into()));
    }
    Ok((g / ng as f64, i / ni as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticFaces;

    fn t(v: &[f32]) -> Template {
        Template { vector: v.to_vec(), subject_id: "s".into(), sample_id: "a".into(), extractor_id: "x".into() }
    }

    #[test]
    fn similarity_definitions() {
        assert!((similarity(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&t(&[1.0, 0.0]), &t(&[0.0, 3.0])).unwrap(), 0.0);
        assert!((similarity(&t(&[1.0, -2.0]), &t(&[-1.0, 2.0])).unwrap() + 1.0).abs() < 1e-12);
        assert!((similarity(&t(&[1.0, 2.0]), &t(&[2.0, 4.5])).unwrap() - similarity(&t(&[7.0, 14.0]), &t(&[2.0, 4.5])).unwrap()).abs() < 1e-12);
        assert!(matches!(similarity(&t(&[0.0, 0.0]), &t(&[1.0, 0.0])), Err(Error::ZeroVector)));
        assert!(similarity(&t(&[1.0]), &t(&[1.0, 0.0])).is_err());
        let mut other = t(&[1.0, 0.0]);
        other.extractor_id = "y".into();
        assert!(matches!(similarity(&t(&[1.0, 0.0]), &other), Err(Error::ExtractorMismatch(_))));
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        let labels = [0, 0, 1, 1];
        let emb = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f32 * 0.7).sin());
        let (_, g, _, _) = contrastive(&emb, &labels, -1.0);
        let h = 1e-3f32;
        for (i, j) in [(0, 0), (1, 2), (3, 1)] {
            let mut p = emb.clone();
            p[[i, j]] += h;
            let mut m = emb.clone();
            m[[i, j]] -= h;
            let num = (contrastive(&p, &labels, -1.0).0 - contrastive(&m, &labels, -1.0).0) / (2.0 * h as f64);
            assert!((num - g[[i, j]] as f64).abs() < 1e-3, "{num} vs {}", g[[i, j]]);
        }
    }

    #[test]
    fn trains_checks_and_round_trips() {
        let faces = SyntheticFaces::new(16, 4, 3, 3).generate();
        let cfg = ExtractorConfig { input_size: 16, width: 4, output_dim: 16, steps: 5, subjects_per_batch: 4, samples_per_subject: 2, ..Default::default() };
        let ex = train_stand_in_on_faces(&faces, &cfg, |_| {}).unwrap();
        assert_eq!(ex.handle().output_dim, 16);
        let a = ex.extract(&faces[0]).unwrap();
        assert_eq!(a, ex.extract(&faces[0]).unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-4);
        let dir = tempfile::tempdir().unwrap();
        ex.save(&dir.path().join("e.ckpt")).unwrap();
        let back = CnnExtractor::load(&dir.path().join("e.ckpt")).unwrap();
        assert_eq!(back.extract(&faces[0]).unwrap(), a);
        assert_eq!(back.digest(), ex.digest());

        let big = SyntheticFaces::new(32, 1, 2, 3).generate();
        assert!(matches!(ex.extract(&big[0]), Err(Error::Shape { .. })));
        let single = &faces[..3];
        assert!(matches!(train_stand_in_on_faces(single, &cfg, |_| {}), Err(Error::Insufficient(_))));
    }

    #[test]
    fn embedding_file_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        fs::write(
            &path,
            "{\"subject_id\":\"s1\",\"sample_id\":\"a\",\"vector\":[0.6,0.8]}\n{\"subject_id\":\"s2\",\"sample_id\":\"a\",\"vector\":[1.0,0.0]}\n",
        )
        .unwrap();
        let ex = EmbeddingFileExtractor::load(&path, "facenet", 16).unwrap();
        assert!(ex.handle().unit_norm);
        let img = FaceImage::new(ndarray::Array3::<f32>::zeros((3, 16, 16)), "s1", "a").unwrap();
        assert_eq!(ex.extract(&img).unwrap().vector, vec![0.6, 0.8]);
        let missing = FaceImage::new(ndarray::Array3::<f32>::zeros((3, 16, 16)), "s9", "a").unwrap();
        assert!(ex.extract(&missing).is_err());
    }
}
