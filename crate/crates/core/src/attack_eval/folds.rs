use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FaceImage;
use crate::{Error, Result};

/// One subject-disjoint evaluation split. Pair indices point into `test`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub subjects: Vec<String>,
    /// Indices into the face list the fold was generated from.
    pub test: Vec<usize>,
    pub genuine_pairs: Vec<(usize, usize)>,
    pub impostor_pairs: Vec<(usize, usize)>,
}

/// Splits the subjects of `faces` into `n_folds` seeded, disjoint groups.
///
/// Each fold's genuine pairs are all same-subject pairs of distinct samples
/// and its impostor pairs are all cross-subject pairs within the fold.
pub fn subject_folds(faces: &[FaceImage], n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in faces.iter().enumerate() {
        by_subject.entry(&f.subject_id).or_default().push(i);
    }
    if n_folds == 0 || by_subject.len() < 2 * n_folds {
        return Err(Error::Insufficient(format!(
            "{} subjects cannot form {n_folds} folds of at least two subjects",
            by_subject.len()
        )));
    }
    let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Fold> = (0..n_folds)
        .map(|id| Fold { id, subjects: vec![], test: vec![], genuine_pairs: vec![], impostor_pairs: vec![] })
        .collect();
    for (k, s) in subjects.iter().enumerate() {
        let fold = &mut folds[k % n_folds];
        fold.subjects.push(s.to_string());
        fold.test.extend(&by_subject[s]);
    }
    for fold in &mut folds {
        fold.test.sort_unstable();
        for a in 0..fold.test.len() {
            for b in a + 1..fold.test.len() {
                let (fa, fb) = (&faces[fold.test[a]], &faces[fold.test[b]]);
                if fa.subject_id != fb.subject_id {
                    fold.impostor_pairs.push((a, b));
                } else if fa.sample_id != fb.sample_id {
                    fold.genuine_pairs.push((a, b));
                }
            }
        }
    }
    Ok(folds)
}
