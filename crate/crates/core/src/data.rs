//! Dataset manifests, geometric alignment and pixel normalisation.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::{par, Error, Result};

/// Five-point layout for a 112x112 crop (eye centres, nose tip, mouth corners),
/// scaled linearly to the working resolution.
pub const CANONICAL_LANDMARKS_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

pub fn canonical_landmarks(out_size: usize) -> [[f64; 2]; 5] {
    let s = out_size as f64 / 112.0;
    CANONICAL_LANDMARKS_112.map(|[x, y]| [x * s, y * s])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub sample_id: String,
    /// Flattened `[x1, y1, ..., x5, y5]` in source-image pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<f64>>,
    #[serde(default)]
    pub partition: String,
}

impl ManifestEntry {
    pub fn landmark_points(&self) -> Option<[[f64; 2]; 5]> {
        let l = self.landmarks.as_ref()?;
        Some(std::array::from_fn(|i| [l[2 * i], l[2 * i + 1]]))
    }
}

/// Validated, immutable list of dataset entries. Relative image paths are
/// resolved against `root` (the manifest's directory).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl ImageManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.subject_id.as_str(), e.sample_id.as_str())) {
                return Err(Error::DuplicateIdentity {
                    subject_id: e.subject_id.clone(),
                    sample_id: e.sample_id.clone(),
                });
            }
        }
        Ok(Self { entries, root: root.into() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.subject_id.as_str()))
            .map(|e| e.subject_id.clone())
            .collect()
    }

    /// Entries whose partition tag equals `partition`.
    pub fn partition(&self, partition: &str) -> ImageManifest {
        Self {
            entries: self.entries.iter().filter(|e| e.partition == partition).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn subset(&self, keep: impl Fn(&ManifestEntry) -> bool) -> ImageManifest {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            root: self.root.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a JSON Lines manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<ImageManifest> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err(line, "expected a JSON object".into()))?;
        for field in ["path", "subject_id", "sample_id"] {
            if !obj.contains_key(field) {
                return Err(Error::MissingField { path: path.to_path_buf(), line, field });
            }
        }
        let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
        if let Some(l) = &entry.landmarks {
            if l.len() != 10 {
                return Err(parse_err(line, format!("landmarks need 10 values, got {}", l.len())));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(parse_err(1, "manifest has no entries".into()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ImageManifest::new(entries, root)
}

/// Saves `faces` as `<subject>_<sample>.png` files in `dir` with a
/// `manifest.jsonl` listing them under `partition`.
pub fn write_faces(faces: &[FaceImage], dir: &Path, partition: &str) -> Result<ImageManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(faces.len());
    for f in faces {
        let name = format!("{}_{}.png", f.subject_id, f.sample_id);
        f.save_png(&dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name.into(),
            subject_id: f.subject_id.clone(),
            sample_id: f.sample_id.clone(),
            landmarks: None,
            partition: partition.to_string(),
        });
    }
    let manifest = ImageManifest::new(entries, dir)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// A normalised `(c, h, w)` face image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pub pixels: Array3<f32>,
    pub subject_id: String,
    pub sample_id: String,
}

impl FaceImage {
    pub fn new(pixels: Array3<f32>, subject_id: impl Into<String>, sample_id: impl Into<String>) -> Result<Self> {
        let (_, h, w) = pixels.dim();
        if h != w {
            return Err(Error::Shape { expected: "square image".into(), actual: format!("{h}x{w}") });
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { pixels, subject_id: subject_id.into(), sample_id: sample_id.into() })
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (_, h, w) = self.pixels.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| {
                denormalize_pixel(self.pixels[[c.min(self.pixels.dim().0 - 1), y as usize, x as usize]])
            }))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }
}

/// `raw / 127.5 - 1`, rejecting values outside `[0, 255]`.
pub fn normalize_pixels(raw: &ArrayView3<i32>) -> Result<Array3<f32>> {
    if let Some(v) = raw.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 255]")));
    }
    Ok(raw.mapv(|v| v as f32 / 127.5 - 1.0))
}

pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `(v + 1) * 127.5`, rounded and clamped to a byte.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        normalize_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

/// Similarity transform `p -> scale * R(angle) p + t`, stored as `[a, b, tx, ty]`
/// with `a = s cos(angle)`, `b = s sin(angle)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty]
    }

    pub fn inverse(&self) -> Similarity {
        let det = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / det, -self.b / det);
        Similarity { a, b, tx: -(a * self.tx - b * self.ty), ty: -(b * self.tx + a * self.ty) }
    }

    /// Least-squares similarity mapping `src` onto `dst`.
    pub fn estimate(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity> {
        let n = src.len() as f64;
        let mean = |p: &[[f64; 2]]| {
            let s = p.iter().fold([0.0, 0.0], |acc, q| [acc[0] + q[0], acc[1] + q[1]]);
            [s[0] / n, s[1] / n]
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut sxx, mut syy, mut sxy, mut num_a, mut num_b) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (x, y) = (s[0] - ms[0], s[1] - ms[1]);
            let (u, v) = (d[0] - md[0], d[1] - md[1]);
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            num_a += x * u + y * v;
            num_b += x * v - y * u;
        }
        let spread = sxx + syy;
        if spread / n < 1e-12 {
            return Err(Error::DegenerateLandmarks("landmarks are coincident".into()));
        }
        // Smallest eigenvalue of the 2x2 scatter matrix: zero when points are collinear.
        let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
        let minor = 0.5 * (spread - disc);
        if minor / spread < 1e-6 {
            return Err(Error::DegenerateLandmarks("landmarks are collinear".into()));
        }
        let (a, b) = (num_a / spread, num_b / spread);
        Ok(Similarity { a, b, tx: md[0] - (a * ms[0] - b * ms[1]), ty: md[1] - (b * ms[0] + a * ms[1]) })
    }
}

fn bilinear(img: &RgbImage, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.get_pixel(xi as u32, yi as u32)[c] as f64
        }
    };
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1) * (1.0 - fx) * fy
        + px(x0 + 1, y0 + 1) * fx * fy
}

/// Warps `raw` so its landmarks land on the canonical layout, producing an
/// `out_size x out_size` normalised crop.
pub fn align_and_crop(
    raw: &RgbImage,
    landmarks: &[[f64; 2]; 5],
    out_size: usize,
    subject_id: &str,
    sample_id: &str,
) -> Result<FaceImage> {
    if out_size < 16 {
        return Err(Error::Config(format!("out_size {out_size} below minimum 16")));
    }
    let to_canonical = Similarity::estimate(landmarks, &canonical_landmarks(out_size))?;
    let back = to_canonical.inverse();
    let pixels = Array3::from_shape_fn((3, out_size, out_size), |(c, y, x)| {
        let [sx, sy] = back.apply([x as f64, y as f64]);
        let v = bilinear(raw, sx, sy, c).clamp(0.0, 255.0);
        (v / 127.5 - 1.0) as f32
    });
    FaceImage::new(pixels, subject_id, sample_id)
}

/// Loads one entry at the working resolution. Entries without landmarks are
/// taken as pre-aligned: centre-cropped to a square and resized.
pub fn load_face(manifest: &ImageManifest, entry: &ManifestEntry, out_size: usize) -> Result<FaceImage> {
    let path = manifest.resolve(entry);
    let img = image::open(&path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
        .to_rgb8();
    match entry.landmark_points() {
        Some(lm) => align_and_crop(&img, &lm, out_size, &entry.subject_id, &entry.sample_id),
        None => {
            let (w, h) = img.dimensions();
            let side = w.min(h);
            let cropped = imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
            let sized = if side as usize == out_size {
                cropped
            } else {
                imageops::resize(&cropped, out_size as u32, out_size as u32, imageops::FilterType::Triangle)
            };
            FaceImage::new(rgb_to_tensor(&sized), &entry.subject_id, &entry.sample_id)
        }
    }
}

/// Loads every entry, in manifest order.
pub fn load_faces(manifest: &ImageManifest, out_size: usize) -> Result<Vec<FaceImage>> {
    par::map_indices(manifest.len(), |i| load_face(manifest, &manifest.entries[i], out_size))
        .into_iter()
        .collect()
}
