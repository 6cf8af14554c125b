use serde::{Deserialize, Serialize};

use super::ScoreSet;
use crate::extractor::{cosine, Template};
use crate::{Error, Result};

/// TAR (in percent) at one target FAR (a fraction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarPoint {
    pub far: f64,
    pub threshold: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Fraction of impostor scores accepted.
    pub far: f64,
    /// Percentage of genuine scores accepted.
    pub tar: f64,
}

/// Fold aggregate for one FAR: mean, population deviation and `mu - sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarAggregate {
    pub far: f64,
    pub mu: f64,
    pub sigma: f64,
    pub reported: f64,
    /// Mean threshold across folds.
    pub threshold: f64,
}

/// Smallest representable value strictly above `x`.
pub fn next_above(x: f64) -> f64 {
    x.next_up()
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn count_at_least(sorted_desc: &[f64], t: f64) -> usize {
    sorted_desc.partition_point(|&v| v >= t)
}

/// Threshold for `far` over descending impostor scores: the smallest
/// impostor score whose acceptance fraction does not exceed `far`, or just
/// above the maximum when even the top score is too frequent.
fn threshold_for(imp_desc: &[f64], far: f64) -> f64 {
    let allowed = (far * imp_desc.len() as f64 + 1e-9).floor() as usize;
    let mut best = next_above(imp_desc[0]);
    let mut i = 0;
    while i < imp_desc.len() {
        let v = imp_desc[i];
        let mut j = i;
        while j < imp_desc.len() && imp_desc[j] == v {
            j += 1;
        }
        if j > allowed {
            break;
        }
        best = v;
        i = j;
    }
    best
}

/// TAR at each requested FAR with "score >= threshold accepts".
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<FarPoint>> {
    scores.validate()?;
    let imp = sorted_desc(&scores.impostor);
    let gen = sorted_desc(&scores.genuine);
    far_targets
        .iter()
        .map(|&far| {
            if !(far > 0.0 && far < 1.0) {
                return Err(Error::OutOfRange(format!("FAR target {far} must lie in (0, 1)")));
            }
            if (imp.len() as f64) * far < 1.0 - 1e-9 {
                return Err(Error::InsufficientImpostors { have: imp.len(), far });
            }
            let threshold = threshold_for(&imp, far);
            let tar = 100.0 * count_at_least(&gen, threshold) as f64 / gen.len() as f64;
            Ok(FarPoint { far, threshold, tar })
        })
        .collect()
}

/// One ROC point per distinct score value, by decreasing threshold.
pub fn roc_curve(scores: &ScoreSet) -> Vec<RocPoint> {
    let imp = sorted_desc(&scores.impostor);
    let gen = sorted_desc(&scores.genuine);
    let mut all: Vec<f64> = imp.iter().chain(&gen).copied().collect();
    all.sort_by(|a, b| b.total_cmp(a));
    all.dedup();
    let (ni, ng) = (imp.len().max(1) as f64, gen.len().max(1) as f64);
    all.into_iter()
        .map(|t| RocPoint {
            threshold: t,
            far: count_at_least(&imp, t) as f64 / ni,
            tar: 100.0 * count_at_least(&gen, t) as f64 / ng,
        })
        .collect()
}

/// Per-FAR `mu - sigma` over folds, with the population standard deviation.
pub fn aggregate_folds(per_fold: &[Vec<FarPoint>]) -> Result<Vec<FarAggregate>> {
    if per_fold.len() < 2 {
        return Err(Error::Insufficient(format!("{} fold(s); aggregation needs at least 2", per_fold.len())));
    }
    let fars: Vec<f64> = per_fold[0].iter().map(|p| p.far).collect();
    if per_fold.iter().any(|f| f.iter().map(|p| p.far).ne(fars.iter().copied())) {
        return Err(Error::Config("folds were evaluated at different FAR targets".into()));
    }
    let n = per_fold.len() as f64;
    Ok(fars
        .iter()
        .enumerate()
        .map(|(k, &far)| {
            let mu = per_fold.iter().map(|f| f[k].tar).sum::<f64>() / n;
            let var = per_fold.iter().map(|f| (f[k].tar - mu).powi(2)).sum::<f64>() / n;
            let sigma = var.sqrt();
            let threshold = per_fold.iter().map(|f| f[k].threshold).sum::<f64>() / n;
            FarAggregate { far, mu, sigma, reported: mu - sigma, threshold }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMatch {
    pub probe_subject: String,
    pub probe_sample: String,
    pub gallery_index: usize,
    pub matched_subject: String,
    pub score: f64,
    /// Whether another gallery entry reached the same maximum score.
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub partition: String,
    /// Rank-1 rate in percent.
    pub rate: f64,
    pub matches: Vec<ProbeMatch>,
}

/// Closed-set rank-1 matching by maximum cosine similarity; ties go to the
/// lowest gallery index.
pub fn rank1_identification(gallery: &[Template], probes: &[Template]) -> Result<IdentificationResult> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Insufficient(format!("{} gallery and {} probe templates", gallery.len(), probes.len())));
    }
    let matches = crate::par::map_indices(probes.len(), |p| -> Result<ProbeMatch> {
        let probe = &probes[p];
        let (mut best, mut best_i, mut tie) = (f64::NEG_INFINITY, 0, false);
        for (i, g) in gallery.iter().enumerate() {
            let s = cosine(&probe.vector, &g.vector)?;
            if s > best {
                (best, best_i, tie) = (s, i, false);
            } else if s == best {
                tie = true;
            }
        }
        Ok(ProbeMatch {
            probe_subject: probe.subject_id.clone(),
            probe_sample: probe.sample_id.clone(),
            gallery_index: best_i,
            matched_subject: gallery[best_i].subject_id.clone(),
            score: best,
            tie,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let correct = matches.iter().filter(|m| m.matched_subject == m.probe_subject).count();
    Ok(IdentificationResult {
        partition: String::new(),
        rate: 100.0 * correct as f64 / matches.len() as f64,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::super::AttackKind;
    use super::*;
    use proptest::prelude::*;

    fn set(genuine: Vec<f64>, impostor: Vec<f64>) -> ScoreSet {
        ScoreSet { genuine, impostor, fold_id: 0, attack_kind: AttackKind::Type1 }
    }

    fn brute(s: &ScoreSet, far: f64) -> (f64, f64) {
        let n = s.impostor.len() as f64;
        let mut cands: Vec<f64> = s.impostor.clone();
        cands.push(s.impostor.iter().cloned().fold(f64::NEG_INFINITY, f64::max).next_up());
        let ok = |t: f64| s.impostor.iter().filter(|&&v| v >= t).count() as f64 / n <= far + 1e-12;
        let t = cands.into_iter().filter(|&t| ok(t)).fold(f64::INFINITY, f64::min);
        let tar = 100.0 * s.genuine.iter().filter(|&&g| g >= t).count() as f64 / s.genuine.len() as f64;
        (t, tar)
    }

    #[test]
    fn ten_impostor_example() {
        let imp: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let r = tar_at_far(&set(vec![0.95, 1.0], imp), &[0.1]).unwrap();
        assert_eq!(r[0].threshold, 1.0);
        assert_eq!(r[0].tar, 50.0);
    }

    #[test]
    fn separation_and_precondition() {
        let s = set(vec![0.9, 0.95], (0..1000).map(|i| i as f64 / 2000.0).collect());
        assert!(tar_at_far(&s, &[0.001, 0.01, 0.5]).unwrap().iter().all(|p| p.tar == 100.0));
        let few = set(vec![0.9], vec![0.1; 100]);
        assert!(matches!(tar_at_far(&few, &[0.001]), Err(Error::InsufficientImpostors { have: 100, .. })));
        let r = tar_at_far(&few, &[0.01]).unwrap();
        assert_eq!(r[0].threshold, 0.1f64.next_up());
    }

    #[test]
    fn aggregation() {
        let fold = |t: f64| vec![FarPoint { far: 0.01, threshold: 0.5, tar: t }];
        let a = aggregate_folds(&[fold(80.0), fold(90.0)]).unwrap();
        assert_eq!((a[0].mu, a[0].sigma, a[0].reported), (85.0, 5.0, 80.0));
        let same = aggregate_folds(&[fold(70.0), fold(70.0), fold(70.0)]).unwrap();
        assert_eq!(same[0].reported, 70.0);
        assert!(aggregate_folds(&[fold(70.0)]).is_err());
    }

    fn tpl(v: Vec<f32>, s: &str) -> Template {
        Template { vector: v, subject_id: s.into(), sample_id: "0".into(), extractor_id: "x".into() }
    }

    #[test]
    fn rank1_argmax_and_ties() {
        let g = vec![tpl(vec![1., 0., 0.], "a"), tpl(vec![0., 1., 0.], "b"), tpl(vec![0., 0., 1.], "c")];
        let r = rank1_identification(&g, &[tpl(vec![0., 2., 0.], "b")]).unwrap();
        assert_eq!((r.rate, r.matches[0].gallery_index), (100.0, 1));
        let r = rank1_identification(&g, &[tpl(vec![0., 1., 1.], "c")]).unwrap();
        assert_eq!(r.matches[0].matched_subject, "b");
        assert!(r.matches[0].tie);
        assert!(rank1_identification(&[], &g).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            imp in prop::collection::vec(-100i32..100, 100..300),
            gen in prop::collection::vec(-100i32..100, 1..50),
            far in prop::sample::select(vec![0.01, 0.05, 0.1, 0.3]),
        ) {
            let s = set(gen.iter().map(|&v| v as f64 / 100.0).collect(), imp.iter().map(|&v| v as f64 / 100.0).collect());
            let r = tar_at_far(&s, &[far]).unwrap();
            let (t, tar) = brute(&s, far);
            prop_assert_eq!(r[0].threshold, t);
            prop_assert_eq!(r[0].tar, tar);
        }

        #[test]
        fn tar_is_monotone(imp in prop::collection::vec(-1.0f64..1.0, 100..200), gen in prop::collection::vec(-1.0f64..1.0, 1..40)) {
            let r = tar_at_far(&set(gen, imp), &[0.01, 0.05, 0.2, 0.5]).unwrap();
            for w in r.windows(2) {
                prop_assert!(w[0].tar <= w[1].tar);
                prop_assert!(w[0].threshold >= w[1].threshold);
            }
        }
    }
}
