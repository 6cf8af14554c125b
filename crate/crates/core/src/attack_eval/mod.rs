//! Attack evaluation: type-I and type-II verification and closed-set
//! identification with reconstructed faces.
//!
//! A type-I attack matches the reconstruction `g(f(x))` against the image `x`
//! its template came from. A type-II attack matches it against a different
//! image of the same subject. Impostor scores always come from original
//! images, so the operating threshold is the one a deployed system would use.

mod folds;
mod metrics;
mod report;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::FaceImage;
use crate::extractor::{cosine, stack_templates, Extractor, Template};
use crate::nbnet::ReconstructionModel;
use crate::par;
use crate::{Error, Result};

pub use folds::{subject_folds, Fold};
pub use metrics::{
    aggregate_folds, next_above, rank1_identification, roc_curve, tar_at_far, FarAggregate, FarPoint,
    IdentificationResult, ProbeMatch, RocPoint,
};
pub use report::{render_report, FoldPoints, IdentificationEntry, Report, ReportFiles, VerificationResult, SIGMA_CONVENTION, THRESHOLD_CONVENTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Original,
    Type1,
    Type2,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Original => "original",
            AttackKind::Type1 => "type1",
            AttackKind::Type2 => "type2",
        }
    }
}

/// Genuine and impostor similarity scores of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub fold_id: usize,
    pub attack_kind: AttackKind,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Insufficient(format!(
                "fold {}: {} genuine and {} impostor scores",
                self.fold_id,
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if let Some(v) = self.genuine.iter().chain(&self.impostor).find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("similarity score {v} outside [-1, 1]")));
        }
        Ok(())
    }
}

/// Produces face images from templates.
pub trait Reconstructor: Sync {
    fn name(&self) -> String;

    /// One image per template row. `originals` are the faces the templates
    /// were extracted from; only reference reconstructors look at them.
    fn reconstruct_batch(&self, templates: &Array2<f32>, originals: &[FaceImage]) -> Result<Vec<FaceImage>>;
}

impl Reconstructor for ReconstructionModel<f32> {
    fn name(&self) -> String {
        self.spec.arch.name().to_string()
    }

    fn reconstruct_batch(&self, templates: &Array2<f32>, originals: &[FaceImage]) -> Result<Vec<FaceImage>> {
        let mut out = Vec::with_capacity(originals.len());
        for start in (0..templates.nrows()).step_by(64) {
            let end = (start + 64).min(templates.nrows());
            let imgs = self.infer(templates.slice(s![start..end, ..]))?;
            for (img, orig) in imgs.outer_iter().zip(&originals[start..end]) {
                let px = img.mapv(|v| v.clamp(-1.0, 1.0));
                out.push(FaceImage::new(px, orig.subject_id.clone(), orig.sample_id.clone())?);
            }
        }
        Ok(out)
    }
}

/// Returns the source image unchanged; the perfect-reconstruction reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn name(&self) -> String {
        "original".into()
    }

    fn reconstruct_batch(&self, _templates: &Array2<f32>, originals: &[FaceImage]) -> Result<Vec<FaceImage>> {
        Ok(originals.to_vec())
    }
}

/// Returns the same image for every template.
#[derive(Clone, Debug)]
pub struct ConstantReconstructor(pub Array3<f32>);

impl Reconstructor for ConstantReconstructor {
    fn name(&self) -> String {
        "constant".into()
    }

    fn reconstruct_batch(&self, _templates: &Array2<f32>, originals: &[FaceImage]) -> Result<Vec<FaceImage>> {
        originals
            .iter()
            .map(|o| FaceImage::new(self.0.clone(), o.subject_id.clone(), o.sample_id.clone()))
            .collect()
    }
}

/// Original and reconstructed templates of a fold's test images.
#[derive(Clone, Debug)]
pub struct FoldTemplates {
    pub fold_id: usize,
    pub original: Vec<Template>,
    pub reconstructed: Vec<Template>,
}

/// Extracts the fold's test images, reconstructs them and re-extracts the
/// reconstructions. Index `k` of both lists refers to `fold.test[k]`.
pub fn fold_templates(
    faces: &[FaceImage],
    fold: &Fold,
    reconstructor: &dyn Reconstructor,
    extractor: &dyn Extractor,
) -> Result<FoldTemplates> {
    if fold.test.is_empty() {
        return Err(Error::Insufficient(format!("fold {} has no test images", fold.id)));
    }
    let test: Vec<FaceImage> = fold.test.iter().map(|&i| faces[i].clone()).collect();
    let original = extractor.extract_all(&test)?;
    let recon_imgs = reconstructor.reconstruct_batch(&stack_templates(&original), &test)?;
    let reconstructed = extractor.extract_all(&recon_imgs)?;
    Ok(FoldTemplates { fold_id: fold.id, original, reconstructed })
}

fn pair_scores(pairs: &[(usize, usize)], a: &[Template], b: &[Template]) -> Result<Vec<f64>> {
    par::map_indices(pairs.len(), |k| {
        let (i, j) = pairs[k];
        cosine(&a[i].vector, &b[j].vector)
    })
    .into_iter()
    .collect()
}

impl FoldTemplates {
    fn impostors(&self, fold: &Fold) -> Result<Vec<f64>> {
        pair_scores(&fold.impostor_pairs, &self.original, &self.original)
    }

    /// Scores with no attack: genuine pairs of original images.
    pub fn original_scores(&self, fold: &Fold) -> Result<ScoreSet> {
        let genuine = pair_scores(&fold.genuine_pairs, &self.original, &self.original)?;
        self.finish(fold, genuine, AttackKind::Original)
    }

    pub fn type1_scores(&self, fold: &Fold) -> Result<ScoreSet> {
        let idx: Vec<(usize, usize)> = (0..self.original.len()).map(|k| (k, k)).collect();
        let genuine = pair_scores(&idx, &self.original, &self.reconstructed)?;
        self.finish(fold, genuine, AttackKind::Type1)
    }

    /// Each genuine pair `(a, b)` scores `f(b)` against `f(g(f(a)))`.
    pub fn type2_scores(&self, fold: &Fold) -> Result<ScoreSet> {
        for &(a, b) in &fold.genuine_pairs {
            let (ta, tb) = (&self.original[a], &self.original[b]);
            if ta.sample_id == tb.sample_id || ta.subject_id != tb.subject_id {
                return Err(Error::Config(format!(
                    "type-II pair must be distinct samples of one subject, got ({}/{}, {}/{})",
                    ta.subject_id, ta.sample_id, tb.subject_id, tb.sample_id
                )));
            }
        }
        let swapped: Vec<(usize, usize)> = fold.genuine_pairs.iter().map(|&(a, b)| (b, a)).collect();
        let genuine = pair_scores(&swapped, &self.original, &self.reconstructed)?;
        self.finish(fold, genuine, AttackKind::Type2)
    }

    fn finish(&self, fold: &Fold, genuine: Vec<f64>, attack_kind: AttackKind) -> Result<ScoreSet> {
        let s = ScoreSet { genuine, impostor: self.impostors(fold)?, fold_id: fold.id, attack_kind };
        s.validate()?;
        Ok(s)
    }
}

pub fn build_type1_scores(
    faces: &[FaceImage],
    reconstructor: &dyn Reconstructor,
    extractor: &dyn Extractor,
    fold: &Fold,
) -> Result<ScoreSet> {
    fold_templates(faces, fold, reconstructor, extractor)?.type1_scores(fold)
}

pub fn build_type2_scores(
    faces: &[FaceImage],
    reconstructor: &dyn Reconstructor,
    extractor: &dyn Extractor,
    fold: &Fold,
) -> Result<ScoreSet> {
    fold_templates(faces, fold, reconstructor, extractor)?.type2_scores(fold)
}

/// Scores every fold once and returns one verification result per attack.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_verification(
    faces: &[FaceImage],
    folds: &[Fold],
    reconstructor: &dyn Reconstructor,
    extractor: &dyn Extractor,
    attacks: &[AttackKind],
    fars: &[f64],
    model: &str,
    dataset: &str,
) -> Result<Vec<VerificationResult>> {
    let mut per_attack: Vec<Vec<ScoreSet>> = vec![Vec::with_capacity(folds.len()); attacks.len()];
    for fold in folds {
        let t = fold_templates(faces, fold, reconstructor, extractor)?;
        for (k, kind) in attacks.iter().enumerate() {
            per_attack[k].push(match kind {
                AttackKind::Original => t.original_scores(fold)?,
                AttackKind::Type1 => t.type1_scores(fold)?,
                AttackKind::Type2 => t.type2_scores(fold)?,
            });
        }
    }
    attacks
        .iter()
        .zip(&per_attack)
        .map(|(_, sets)| VerificationResult::from_scores(model, dataset, sets, fars))
        .collect()
}

/// Rank-1 identification of `probes` (optionally reconstructed from their
/// templates first) against a gallery of original faces.
pub fn identify(
    gallery: &[FaceImage],
    probes: &[FaceImage],
    reconstructor: Option<&dyn Reconstructor>,
    extractor: &dyn Extractor,
    partition: &str,
) -> Result<IdentificationResult> {
    let g = extractor.extract_all(gallery)?;
    let mut p = extractor.extract_all(probes)?;
    if let Some(r) = reconstructor {
        let imgs = r.reconstruct_batch(&stack_templates(&p), probes)?;
        p = extractor.extract_all(&imgs)?;
    }
    let mut res = rank1_identification(&g, &p)?;
    res.partition = partition.to_string();
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{train_stand_in_on_faces, ExtractorConfig};
    use crate::synthetic::SyntheticFaces;

    fn setup() -> (Vec<FaceImage>, crate::extractor::CnnExtractor, Vec<Fold>) {
        let faces = SyntheticFaces::new(32, 10, 3, 4).generate();
        let cfg = ExtractorConfig { width: 4, output_dim: 16, steps: 20, ..Default::default() };
        let ex = train_stand_in_on_faces(&faces, &cfg, |_| {}).unwrap();
        let folds = subject_folds(&faces, 2, 1).unwrap();
        (faces, ex, folds)
    }

    #[test]
    fn identity_reconstructor_is_perfect() {
        let (faces, ex, folds) = setup();
        for fold in &folds {
            let t = fold_templates(&faces, fold, &IdentityReconstructor, &ex).unwrap();
            let s1 = t.type1_scores(fold).unwrap();
            assert!(s1.genuine.iter().all(|&g| (g - 1.0).abs() < 1e-6));
            let rows = tar_at_far(&s1, &[0.05, 0.1]).unwrap();
            assert!(rows.iter().all(|r| r.tar == 100.0));
            let s2 = t.type2_scores(fold).unwrap();
            let orig = t.original_scores(fold).unwrap();
            assert_eq!(s2.genuine, orig.genuine);
            assert_eq!(s2.impostor, orig.impostor);
        }
        let id = identify(&faces, &faces, Some(&IdentityReconstructor), &ex, "fa").unwrap();
        assert_eq!(id.rate, 100.0);
    }

    #[test]
    fn evaluates_all_attacks_per_fold() {
        let (faces, ex, folds) = setup();
        let kinds = [AttackKind::Type1, AttackKind::Type2, AttackKind::Original];
        let res = evaluate_verification(&faces, &folds, &IdentityReconstructor, &ex, &kinds, &[0.1], "id", "syn").unwrap();
        assert_eq!(res.iter().map(|r| r.attack).collect::<Vec<_>>(), kinds);
        assert_eq!(res[0].reported(0.1), Some(100.0));
        assert_eq!(res[1].aggregate, res[2].aggregate);
    }

    #[test]
    fn constant_reconstructor_concentrates_scores() {
        let (faces, ex, folds) = setup();
        let constant = ConstantReconstructor(faces[0].pixels.clone());
        let s = build_type1_scores(&faces, &constant, &ex, &folds[0]).unwrap();
        let t = ex.extract(&faces[0]).unwrap();
        let test: Vec<FaceImage> = folds[0].test.iter().map(|&i| faces[i].clone()).collect();
        for (g, img) in s.genuine.iter().zip(&test) {
            let want = cosine(&ex.extract(img).unwrap().vector, &t.vector).unwrap();
            assert!((g - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let (faces, ex, folds) = setup();
        let empty = Fold { test: vec![], ..folds[0].clone() };
        assert!(build_type1_scores(&faces, &IdentityReconstructor, &ex, &empty).is_err());
        let mut same = folds[0].clone();
        same.genuine_pairs = vec![(0, 0)];
        assert!(build_type2_scores(&faces, &IdentityReconstructor, &ex, &same).is_err());
    }
}
