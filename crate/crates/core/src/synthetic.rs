//! Procedural "blob-face" datasets for desk-scale experiments.
//!
//! Each subject is a fixed set of colours and facial geometry; each sample of
//! a subject adds a small shift, a lighting change and pixel noise. Images are
//! rendered pre-aligned, so manifests carry no landmarks.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{write_faces, FaceImage, ImageManifest};
use crate::{par, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectStyle {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    /// Face half-width and half-height as fractions of the image side.
    pub face_rx: f64,
    pub face_ry: f64,
    pub hair_line: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
}

impl SubjectStyle {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        fn colour<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
            std::array::from_fn(|_| rng.gen_range(lo..hi))
        }
        let background = colour(rng, 0.0, 1.0);
        let skin_tone = rng.gen_range(0.35..0.95);
        let skin = [skin_tone, skin_tone * rng.gen_range(0.6..0.9), skin_tone * rng.gen_range(0.4..0.8)];
        let hair = colour(rng, 0.0, 0.8);
        let iris = colour(rng, 0.0, 0.7);
        let lips = [rng.gen_range(0.5..0.95), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.45)];
        Self {
            background,
            skin,
            hair,
            iris,
            lips,
            face_rx: rng.gen_range(0.26..0.38),
            face_ry: rng.gen_range(0.34..0.44),
            hair_line: rng.gen_range(0.18..0.38),
            eye_dx: rng.gen_range(0.09..0.16),
            eye_y: rng.gen_range(0.40..0.48),
            eye_r: rng.gen_range(0.035..0.065),
            mouth_y: rng.gen_range(0.66..0.76),
            mouth_w: rng.gen_range(0.07..0.16),
        }
    }

    /// Renders one sample; `shift` moves the face by fractions of the side.
    pub fn render(&self, size: usize, shift: [f64; 2], gain: f64, noise: &[f64]) -> Array3<f32> {
        const SS: usize = 3;
        let mut img = Array3::<f32>::zeros((3, size, size));
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64 - shift[0];
                        let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64 - shift[1];
                        let c = self.shade(u, v);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    let n = noise[(k * size + y) * size + x];
                    let val = acc[k] / (SS * SS) as f64 * gain + n;
                    img[[k, y, x]] = (val.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
                }
            }
        }
        img
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let (cx, cy) = (0.5, 0.52);
        let in_face = ((u - cx) / self.face_rx).powi(2) + ((v - cy) / self.face_ry).powi(2) <= 1.0;
        let hair_top = cy - self.face_ry - 0.06;
        let in_hair = v < self.hair_line
            && v > hair_top
            && ((u - cx) / (self.face_rx + 0.05)).powi(2) + ((v - cy) / (self.face_ry + 0.06)).powi(2) <= 1.0;
        if in_hair {
            return self.hair;
        }
        if !in_face {
            return self.background;
        }
        for side in [-1.0, 1.0] {
            let ex = cx + side * self.eye_dx;
            let d2 = (u - ex).powi(2) + (v - self.eye_y).powi(2);
            if d2 <= (self.eye_r * 0.55).powi(2) {
                return self.iris;
            }
            if d2 <= self.eye_r.powi(2) {
                return [0.95, 0.95, 0.95];
            }
        }
        if (u - cx).abs() <= self.mouth_w && (v - self.mouth_y).abs() <= 0.025 {
            return self.lips;
        }
        if (u - cx).abs() <= 0.02 && v > self.eye_y + 0.04 && v < self.mouth_y - 0.08 {
            return self.skin.map(|c| c * 0.8);
        }
        self.skin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaces {
    pub size: usize,
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub seed: u64,
    /// Maximum shift as a fraction of the side.
    pub max_shift: f64,
    pub gain_spread: f64,
    pub noise_std: f64,
    /// Index of the first sample rendered per subject; disjoint offsets give
    /// fresh samples of the same subjects.
    pub sample_offset: usize,
}

impl SyntheticFaces {
    pub fn new(size: usize, subjects: usize, samples_per_subject: usize, seed: u64) -> Self {
        Self { size, subjects, samples_per_subject, seed, max_shift: 0.04, gain_spread: 0.12, noise_std: 0.02, sample_offset: 0 }
    }

    pub fn styles(&self) -> Vec<SubjectStyle> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.subjects).map(|_| SubjectStyle::random(&mut rng)).collect()
    }

    pub fn subject_id(&self, s: usize) -> String {
        format!("s{:04}", s)
    }

    /// Renders all images, subject-major.
    pub fn generate(&self) -> Vec<FaceImage> {
        let styles = self.styles();
        let per = self.samples_per_subject;
        par::map_indices(self.subjects * per, |i| {
            let (s, k) = (i / per, i % per + self.sample_offset);
            let key = ((s as u64) << 32) | k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(key + 1)));
            let shift = [
                rng.gen_range(-self.max_shift..=self.max_shift),
                rng.gen_range(-self.max_shift..=self.max_shift),
            ];
            let gain = 1.0 + rng.gen_range(-self.gain_spread..=self.gain_spread);
            let dist = Normal::new(0.0, self.noise_std).expect("finite std");
            let noise: Vec<f64> = (0..3 * self.size * self.size).map(|_| dist.sample(&mut rng)).collect();
            let pixels = styles[s].render(self.size, shift, gain, &noise);
            FaceImage::new(pixels, self.subject_id(s), format!("{k:03}")).expect("rendered in range")
        })
    }

    /// Writes PNGs plus a `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, partition: &str) -> Result<ImageManifest> {
        write_faces(&self.generate(), dir, partition)
    }
}

/// A synthetic population split for desk-scale attack experiments.
#[derive(Clone, Debug)]
pub struct DeskSplit {
    /// Training samples of every subject, for the black-box extractor.
    pub extractor_train: Vec<FaceImage>,
    /// Training samples of the first half of the subjects.
    pub attack_train: Vec<FaceImage>,
    /// Fresh samples of the second half of the subjects.
    pub eval: Vec<FaceImage>,
}

impl DeskSplit {
    pub fn new(size: usize, subjects: usize, train_per_subject: usize, eval_per_subject: usize, seed: u64) -> Self {
        let base = SyntheticFaces::new(size, subjects, train_per_subject, seed);
        let extractor_train = base.generate();
        let half = subjects / 2;
        let attack_train = extractor_train[..half * train_per_subject].to_vec();
        let fresh = SyntheticFaces { samples_per_subject: eval_per_subject, sample_offset: train_per_subject, ..base };
        let eval = fresh.generate().split_off(half * eval_per_subject);
        Self { extractor_train, attack_train, eval }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let gen = SyntheticFaces::new(32, 3, 2, 7);
        let a = gen.generate();
        assert_eq!(a.len(), 6);
        assert_eq!(a, gen.generate());
        assert!(a.iter().all(|f| f.pixels.iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(a[2].subject_id, "s0001");
    }

    #[test]
    fn offsets_render_fresh_samples() {
        let base = SyntheticFaces::new(16, 2, 3, 5);
        let all = base.generate();
        let later = SyntheticFaces { sample_offset: 1, samples_per_subject: 2, ..base }.generate();
        assert_eq!(later[0], all[1]);
        assert_eq!(later[3], all[5]);
        assert_eq!(later[3].sample_id, "002");
    }

    #[test]
    fn desk_split_partitions_subjects() {
        let d = DeskSplit::new(16, 6, 3, 2, 1);
        assert_eq!((d.extractor_train.len(), d.attack_train.len(), d.eval.len()), (18, 9, 6));
        assert!(d.attack_train.iter().all(|f| f.subject_id.as_str() < "s0003"));
        assert!(d.eval.iter().all(|f| f.subject_id.as_str() >= "s0003" && f.sample_id.as_str() >= "003"));
    }

    #[test]
    fn subjects_differ_more_than_samples() {
        let faces = SyntheticFaces::new(32, 6, 3, 11).generate();
        let d = |i: usize, j: usize| (&faces[i].pixels - &faces[j].pixels).mapv(|v| v * v).sum();
        let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
        for i in 0..faces.len() {
            for j in i + 1..faces.len() {
                if faces[i].subject_id == faces[j].subject_id {
                    same += d(i, j);
                    ns += 1;
                } else {
                    diff += d(i, j);
                    nd += 1;
                }
            }
        }
        assert!(same / (ns as f32) < 0.5 * diff / (nd as f32));
    }

    #[test]
    fn writes_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = SyntheticFaces::new(16, 2, 2, 1).write(dir.path(), "train").unwrap();
        let back = crate::data::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.entries, m.entries);
        let faces = crate::data::load_faces(&back, 16).unwrap();
        assert_eq!(faces.len(), 4);
    }
}
