//! Ranking and classification metrics for OOD evaluation.
//!
//! Scores follow one convention throughout: higher means more
//! in-distribution. In-distribution samples are the positives for AUROC,
//! AP-ID and the TPR/FPR operating points; AP-OOD ranks by the negated score
//! with OOD samples as positives.

mod report;

pub use report::{
    compute_report, confusion_to_string, pr_curve, report_to_string, roc_curve, write_curve, MetricsReport,
    OOD_CLASS_NAME,
};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    /// Higher = more in-distribution.
    pub score: f64,
    pub is_id: bool,
    /// Predicted class index; `K` is the OOD class.
    pub predicted: usize,
    /// True class index; `K` for every OOD family.
    pub true_class: usize,
    pub true_family: String,
    /// Final-stage probabilities over the K+1 classes (may be empty when only
    /// ranking metrics are needed).
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

/// Numeric order with −0 equal to +0; callers reject non-finite scores first.
pub(crate) fn cmp_score(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(Error::invalid(format!("sample `{}` has a non-finite score", s.id))),
        None => Ok(()),
    }
}

/// Mann–Whitney AUC of positives over negatives; tied pairs earn ½.
pub fn auroc_of(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("AUROC needs both positive and negative samples"));
    }
    if positives.iter().chain(negatives).any(|s| !s.is_finite()) {
        return Err(Error::invalid("AUROC scores must be finite"));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| cmp_score(a.0, b.0));
    // doubled pair count keeps the sum integral
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        twice += 2 * pos_g * neg_below + pos_g * neg_g;
        neg_below += neg_g;
        i = j;
    }
    Ok(twice as f64 / (2.0 * positives.len() as f64 * negatives.len() as f64))
}

fn split_scores(samples: &[ScoredSample]) -> (Vec<f64>, Vec<f64>) {
    let id = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    let ood = samples.iter().filter(|s| !s.is_id).map(|s| s.score).collect();
    (id, ood)
}

/// Probability that a random ID sample outscores a random OOD sample.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let (id, ood) = split_scores(samples);
    auroc_of(&id, &ood)
}

/// Ranking used by AP: descending score (negated for OOD positives), ties by
/// ascending id.
fn ap_ranking(samples: &[ScoredSample], positive: Positive) -> Vec<(f64, &str, bool)> {
    let mut ranked: Vec<(f64, &str, bool)> = samples
        .iter()
        .map(|s| match positive {
            Positive::Id => (s.score, s.id.as_str(), s.is_id),
            Positive::Ood => (-s.score, s.id.as_str(), !s.is_id),
        })
        .collect();
    ranked.sort_by(|a, b| cmp_score(b.0, a.0).then_with(|| a.1.cmp(b.1)));
    ranked
}

/// `Σ_n (R_n − R_{n−1}) P_n` over the ranking.
pub fn average_precision(samples: &[ScoredSample], positive: Positive) -> Result<f64> {
    check_finite(samples)?;
    let ranked = ap_ranking(samples, positive);
    let total = ranked.iter().filter(|r| r.2).count();
    if total == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (n, r) in ranked.iter().enumerate() {
        if r.2 {
            hits += 1;
            ap += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(ap / total as f64)
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("rate target {target} outside (0, 1]")));
    }
    Ok(())
}

/// FPR at the largest threshold whose TPR reaches `tpr_target`; a sample is
/// called in-distribution when its score is at or above the threshold.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    check_target(tpr_target)?;
    check_finite(samples)?;
    let (mut id, ood) = split_scores(samples);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid("FPR at TPR needs both classes"));
    }
    id.sort_by(|a, b| cmp_score(*b, *a));
    let needed = ((tpr_target * id.len() as f64 - 1e-9).ceil() as usize).clamp(1, id.len());
    let threshold = id[needed - 1];
    Ok(ood.iter().filter(|&&s| s >= threshold).count() as f64 / ood.len() as f64)
}

/// Best TPR over thresholds (observed scores and +∞) whose FPR stays within
/// `fpr_target`.
pub fn tpr_at_fpr(samples: &[ScoredSample], fpr_target: f64) -> Result<f64> {
    check_target(fpr_target)?;
    check_finite(samples)?;
    let (id, mut ood) = split_scores(samples);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid("TPR at FPR needs both classes"));
    }
    ood.sort_by(|a, b| cmp_score(*b, *a));
    let allowed = (fpr_target * ood.len() as f64 + 1e-9).floor() as usize;
    if allowed >= ood.len() {
        return Ok(1.0);
    }
    let bar = ood[allowed];
    Ok(id.iter().filter(|&&s| s > bar).count() as f64 / id.len() as f64)
}

/// Rows are true classes, columns predictions; index `n_classes` is OOD.
pub fn confusion_matrix(predictions: &[(usize, usize)], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    let size = n_classes + 1;
    let mut m = vec![vec![0u64; size]; size];
    for &(pred, truth) in predictions {
        if pred >= size || truth >= size {
            return Err(Error::invalid(format!(
                "class index out of range: predicted {pred}, true {truth}, with {size} classes"
            )));
        }
        m[truth][pred] += 1;
    }
    Ok(m)
}

pub fn accuracy(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample set"));
    }
    Ok(samples.iter().filter(|s| s.predicted == s.true_class).count() as f64 / samples.len() as f64)
}

/// Fraction of each OOD family's samples predicted as class `ood_index`.
pub fn ood_recall_by_family(samples: &[ScoredSample], ood_index: usize) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.is_id) {
        let e = counts.entry(s.true_family.clone()).or_default();
        e.1 += 1;
        if s.predicted == ood_index {
            e.0 += 1;
        }
    }
    counts.into_iter().map(|(f, (hit, n))| (f, hit as f64 / n as f64)).collect()
}

/// Macro-average of per-family OOD recall.
pub fn ar_ood(samples: &[ScoredSample], ood_index: usize) -> Result<f64> {
    let recalls = ood_recall_by_family(samples, ood_index);
    if recalls.is_empty() {
        return Err(Error::invalid("AR-OOD needs OOD samples"));
    }
    Ok(recalls.values().sum::<f64>() / recalls.len() as f64)
}

/// AUROC of `family`'s samples against all others, scored by probability
/// column `column`.
pub fn per_family_auc(samples: &[ScoredSample], family: &str, column: usize) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in samples {
        let p = *s
            .class_probs
            .get(column)
            .ok_or_else(|| Error::invalid(format!("sample `{}` has no probability column {column}", s.id)))?;
        if s.true_family == family {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if pos.is_empty() {
        return Err(Error::invalid(format!("family `{family}` absent from the evaluated samples")));
    }
    auroc_of(&pos, &neg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample(id: &str, score: f64, is_id: bool) -> ScoredSample {
        ScoredSample {
            id: id.to_string(),
            score,
            is_id,
            predicted: 0,
            true_class: if is_id { 0 } else { 1 },
            true_family: if is_id { "a".into() } else { "z".into() },
            class_probs: vec![],
        }
    }

    fn from_scores(id: &[f64], ood: &[f64]) -> Vec<ScoredSample> {
        let mut v: Vec<ScoredSample> = id.iter().enumerate().map(|(i, &s)| sample(&format!("i{i:03}"), s, true)).collect();
        v.extend(ood.iter().enumerate().map(|(i, &s)| sample(&format!("o{i:03}"), s, false)));
        v
    }

    fn pair_oracle(s: &[ScoredSample]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for a in s.iter().filter(|x| x.is_id) {
            for b in s.iter().filter(|x| !x.is_id) {
                pairs += 1.0;
                if a.score > b.score {
                    wins += 1.0;
                } else if a.score == b.score {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredSample> {
        let mut v: Vec<ScoredSample> = (0..n)
            .map(|i| {
                // coarse grid so ties occur
                let s = (rng.random_range(-20.0..20.0f64)).round() / 4.0;
                sample(&format!("s{i:03}"), s, rng.random_bool(0.5))
            })
            .collect();
        v[0].is_id = true;
        v[1].is_id = false;
        v
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&from_scores(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(auroc(&from_scores(&[1.0, 1.0], &[1.0, 1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(auroc(&from_scores(&[0.0], &[1.0])).unwrap(), 0.0);
        assert!(auroc(&from_scores(&[1.0], &[])).is_err());
        assert!(auroc(&from_scores(&[f64::NAN], &[1.0])).is_err());
    }

    #[test]
    fn auroc_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let s = random_samples(&mut rng, 50);
        assert!((auroc(&s).unwrap() - pair_oracle(&s)).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let s = from_scores(&[5.0, 4.0], &[1.0, 0.0]);
        assert_eq!(average_precision(&s, Positive::Id).unwrap(), 1.0);
        assert_eq!(average_precision(&s, Positive::Ood).unwrap(), 1.0);
        let s = from_scores(&[0.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((average_precision(&s, Positive::Id).unwrap() - 0.2).abs() < 1e-15);
        assert!(average_precision(&from_scores(&[], &[1.0]), Positive::Id).is_err());
    }

    #[test]
    fn ap_ties_follow_id_order() {
        // positive "i000" sorts before negative "o000" at equal score
        let s = from_scores(&[1.0], &[1.0]);
        assert_eq!(average_precision(&s, Positive::Id).unwrap(), 1.0);
        assert_eq!(average_precision(&s, Positive::Ood).unwrap(), 0.5);
    }

    /// Explicit R_n / P_n sequences over the documented ranking.
    fn ap_oracle(s: &[ScoredSample], positive: Positive) -> f64 {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let key = |i: usize| match positive {
            Positive::Id => s[i].score,
            Positive::Ood => -s[i].score,
        };
        idx.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(s[a].id.cmp(&s[b].id)));
        let is_pos = |i: usize| if positive == Positive::Id { s[i].is_id } else { !s[i].is_id };
        let total = s.iter().enumerate().filter(|(i, _)| is_pos(*i)).count() as f64;
        let mut r_prev = 0.0;
        let mut ap = 0.0;
        let mut tp = 0.0;
        for (n, &i) in idx.iter().enumerate() {
            if is_pos(i) {
                tp += 1.0;
            }
            let r = tp / total;
            let p = tp / (n + 1) as f64;
            ap += (r - r_prev) * p;
            r_prev = r;
        }
        ap
    }

    #[test]
    fn ap_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let s = random_samples(&mut rng, 40);
        for pos in [Positive::Id, Positive::Ood] {
            assert!((average_precision(&s, pos).unwrap() - ap_oracle(&s, pos)).abs() < 1e-12);
        }
    }

    /// Sweeps every observed threshold plus +∞.
    fn sweep(s: &[ScoredSample]) -> Vec<(f64, f64)> {
        let n_id = s.iter().filter(|x| x.is_id).count() as f64;
        let n_ood = s.len() as f64 - n_id;
        let mut th: Vec<f64> = s.iter().map(|x| x.score).collect();
        th.push(f64::INFINITY);
        th.iter()
            .map(|&t| {
                let tp = s.iter().filter(|x| x.is_id && x.score >= t).count() as f64;
                let fp = s.iter().filter(|x| !x.is_id && x.score >= t).count() as f64;
                (tp / n_id, fp / n_ood)
            })
            .collect()
    }

    #[test]
    fn operating_points_match_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_samples(&mut rng, 60);
            let pts = sweep(&s);
            let fpr = pts.iter().filter(|p| p.0 >= 0.95).map(|p| p.1).fold(f64::INFINITY, f64::min);
            let tpr = pts.iter().filter(|p| p.1 <= 0.05).map(|p| p.0).fold(0.0, f64::max);
            assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), fpr);
            assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), tpr);
        }
    }

    #[test]
    fn operating_point_examples() {
        let s = from_scores(&[2.0, 3.0, 4.0], &[0.0, 1.0]);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.0);
        assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), 1.0);
        // full recall forces the threshold down to the lowest ID score
        let s = from_scores(&[0.5, 3.0], &[0.0, 1.0, 2.0, 4.0]);
        assert_eq!(fpr_at_tpr(&s, 1.0).unwrap(), 0.75);
        assert!(fpr_at_tpr(&s, 0.0).is_err());
        assert!(tpr_at_fpr(&s, 1.5).is_err());
        // identical score multisets
        let v: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let s = from_scores(&v, &v);
        assert!(fpr_at_tpr(&s, 0.95).unwrap() >= 0.95 - 1.0 / 80.0);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[(2, 0)], 3).unwrap();
        assert_eq!(m[0][2], 1);
        assert_eq!(m.iter().flatten().sum::<u64>(), 1);
        let m = confusion_matrix(&[(0, 0), (1, 1), (2, 2)], 2).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c, u64::from(i == j));
            }
        }
        assert!(confusion_matrix(&[(3, 0)], 2).is_err());
    }

    #[test]
    fn ar_ood_examples() {
        let mut s = vec![sample("a", 0.0, false), sample("b", 0.0, false), sample("c", 0.0, false)];
        s[0].true_family = "x".into();
        s[1].true_family = "y".into();
        s[2].true_family = "y".into();
        for x in &mut s {
            x.predicted = 4;
        }
        assert_eq!(ar_ood(&s, 4).unwrap(), 1.0);
        s[0].predicted = 1;
        assert_eq!(ar_ood(&s, 4).unwrap(), 0.5);
        s[1].predicted = 1;
        assert_eq!(ar_ood(&s, 4).unwrap(), 0.25);
        assert!(ar_ood(&[sample("a", 0.0, true)], 4).is_err());
    }

    #[test]
    fn per_family_auc_examples() {
        let mut s = from_scores(&[0.0, 0.0], &[0.0]);
        s[0].class_probs = vec![0.9, 0.1];
        s[1].class_probs = vec![0.8, 0.2];
        s[2].class_probs = vec![0.1, 0.9];
        s[1].true_family = "b".into();
        assert_eq!(per_family_auc(&s, "a", 0).unwrap(), 1.0);
        assert_eq!(per_family_auc(&s, "z", 1).unwrap(), 1.0);
        assert_eq!(per_family_auc(&s, "b", 0).unwrap(), 0.5);
        assert!(per_family_auc(&s, "q", 0).is_err());
        assert!(per_family_auc(&s, "a", 5).is_err());
    }

    #[test]
    fn per_family_auc_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let fams = ["a", "b", "c"];
        let s: Vec<ScoredSample> = (0..30)
            .map(|i| {
                let mut x = sample(&format!("s{i}"), 0.0, true);
                x.true_family = fams[i % 3].into();
                x.class_probs = vec![(rng.random_range(0..10) as f64) / 10.0, 0.0];
                x
            })
            .collect();
        let relabeled: Vec<ScoredSample> = s
            .iter()
            .map(|x| {
                let mut y = x.clone();
                y.is_id = x.true_family == "b";
                y.score = x.class_probs[0];
                y
            })
            .collect();
        assert!((per_family_auc(&s, "b", 0).unwrap() - pair_oracle(&relabeled)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(scores in prop::collection::vec(-50.0f64..50.0, 4..40), flags in prop::collection::vec(any::<bool>(), 40)) {
            let mut s: Vec<ScoredSample> = scores.iter().enumerate().map(|(i, &x)| sample(&format!("{i}"), x, flags[i])).collect();
            s[0].is_id = true;
            s[1].is_id = false;
            let base = auroc(&s).unwrap();
            prop_assert!((base - pair_oracle(&s)).abs() < 1e-12);
            let mapped: Vec<ScoredSample> = s.iter().map(|x| { let mut y = x.clone(); y.score = (x.score / 10.0).exp() * 3.0 + 1.0; y }).collect();
            prop_assert!((auroc(&mapped).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<ScoredSample> = s.iter().map(|x| { let mut y = x.clone(); y.score = -x.score; y.is_id = !x.is_id; y }).collect();
            prop_assert!((auroc(&flipped).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn single_positive_ap_is_reciprocal_rank(n in 1usize..30, r in 0usize..30) {
            let r = r % n;
            let s: Vec<ScoredSample> = (0..n).map(|i| sample(&format!("{i:02}"), -(i as f64), i == r)).collect();
            prop_assert!((average_precision(&s, Positive::Id).unwrap() - 1.0 / (r + 1) as f64).abs() < 1e-15);
        }

        #[test]
        fn confusion_totals(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..60)) {
            let m = confusion_matrix(&pairs, 3).unwrap();
            prop_assert_eq!(m.iter().flatten().sum::<u64>() as usize, pairs.len());
            for c in 0..4 {
                prop_assert_eq!(m[c].iter().sum::<u64>() as usize, pairs.iter().filter(|p| p.1 == c).count());
            }
        }

        #[test]
        fn rates_stay_in_unit_interval(scores in prop::collection::vec(-5.0f64..5.0, 2..30), flags in prop::collection::vec(any::<bool>(), 30)) {
            let mut s: Vec<ScoredSample> = scores.iter().enumerate().map(|(i, &x)| sample(&format!("{i}"), x, flags[i])).collect();
            s[0].is_id = true;
            s[1].is_id = false;
            for v in [auroc(&s).unwrap(), average_precision(&s, Positive::Id).unwrap(), average_precision(&s, Positive::Ood).unwrap(), fpr_at_tpr(&s, 0.95).unwrap(), tpr_at_fpr(&s, 0.05).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
