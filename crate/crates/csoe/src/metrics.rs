//! Localization and counting metrics: greedy one-to-one point matching
//! within a pixel threshold, precision/recall/F1, MAE/RMSE over counts, and
//! density-stratified group analysis.

use crate::error::{Error, Result};
use crate::radon::PointSet;

/// One-to-one matching outcome. `missed` is the false-negative count.
///
/// Invariants: `tp == pairs.len()`, `tp + missed == |gt|`, `tp + fp ==
/// |pred|`, every index appears in at most one pair, every pair distance is
/// within the matching threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    /// `(pred index, gt index, distance)` for each matched pair.
    pub pairs: Vec<(usize, usize, f64)>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy one-to-one matching: all cross pairs within `threshold` are
/// sorted by ascending distance (ties by pred then gt index) and accepted
/// greedily, skipping already-matched endpoints.
pub fn match_points(pred: &PointSet, gt: &PointSet, threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!(
            "matching threshold {threshold} must be positive"
        )));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, &p) in pred.points.iter().enumerate() {
        for (gi, &g) in gt.points.iter().enumerate() {
            let d = dist(p, g);
            if d <= threshold {
                candidates.push((d, pi, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.points.len()];
    let mut gt_used = vec![false; gt.points.len()];
    let mut pairs = Vec::new();
    for (d, pi, gi) in candidates {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            pairs.push((pi, gi, d));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: pred.points.len() - tp,
        missed: gt.points.len() - tp,
        pairs,
    })
}

/// Maximum-cardinality one-to-one matching within `threshold` (augmenting
/// paths). Serves as an upper-bound oracle for the greedy protocol.
pub fn match_points_optimal(pred: &PointSet, gt: &PointSet, threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!(
            "matching threshold {threshold} must be positive"
        )));
    }
    let np = pred.points.len();
    let ng = gt.points.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); np];
    for (pi, &p) in pred.points.iter().enumerate() {
        for (gi, &g) in gt.points.iter().enumerate() {
            if dist(p, g) <= threshold {
                adj[pi].push(gi);
            }
        }
    }
    let mut gt_match: Vec<Option<usize>> = vec![None; ng];
    fn augment(
        pi: usize,
        adj: &[Vec<usize>],
        gt_match: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &gi in &adj[pi] {
            if !seen[gi] {
                seen[gi] = true;
                if gt_match[gi].is_none()
                    || augment(gt_match[gi].expect("checked"), adj, gt_match, seen)
                {
                    gt_match[gi] = Some(pi);
                    return true;
                }
            }
        }
        false
    }
    for pi in 0..np {
        let mut seen = vec![false; ng];
        augment(pi, &adj, &mut gt_match, &mut seen);
    }
    let mut pairs = Vec::new();
    for (gi, m) in gt_match.iter().enumerate() {
        if let Some(pi) = m {
            pairs.push((*pi, gi, dist(pred.points[*pi], gt.points[gi])));
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: np - tp,
        missed: ng - tp,
        pairs,
    })
}

/// Precision, recall, F1 with explicit empty-set conventions: precision is
/// 0 when nothing was predicted; recall is 1 when there was nothing to find
/// and nothing was predicted, 0 when there was nothing to find but
/// something was predicted; F1 is 0 when precision + recall is 0.
pub fn precision_recall_f1(mr: &MatchResult) -> (f64, f64, f64) {
    let tp = mr.tp as f64;
    let pred_total = mr.tp + mr.fp;
    let gt_total = mr.tp + mr.missed;
    let p = if pred_total == 0 { 0.0 } else { tp / pred_total as f64 };
    let r = if gt_total == 0 {
        if pred_total == 0 { 1.0 } else { 0.0 }
    } else {
        tp / gt_total as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Mean absolute error and root-mean-square error between count lists.
pub fn mae_rmse(true_counts: &[f64], pred_counts: &[f64]) -> Result<(f64, f64)> {
    if true_counts.len() != pred_counts.len() || true_counts.is_empty() {
        return Err(Error::Domain(format!(
            "count lists must have equal nonzero length, got {} and {}",
            true_counts.len(),
            pred_counts.len()
        )));
    }
    let n = true_counts.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (t, p) in true_counts.iter().zip(pred_counts.iter()) {
        let e = t - p;
        abs_sum += e.abs();
        sq_sum += e * e;
    }
    Ok((abs_sum / n, (sq_sum / n).sqrt()))
}

/// Per-group summary from [`density_group_analysis`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGroup {
    pub len: usize,
    pub mean_count: f64,
    pub mean_f1: f64,
}

/// Rank samples by ground-truth count, split into `group_count` near-equal
/// contiguous groups, and report each group's mean count and mean F1.
pub fn density_group_analysis(
    samples: &[(PointSet, PointSet)],
    group_count: usize,
    threshold: f64,
) -> Result<Vec<DensityGroup>> {
    if group_count == 0 || samples.len() < group_count {
        return Err(Error::Config(format!(
            "cannot split {} samples into {group_count} groups",
            samples.len()
        )));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(samples.len());
    for (gt, pred) in samples {
        let mr = match_points(pred, gt, threshold)?;
        let (_, _, f1) = precision_recall_f1(&mr);
        scored.push((gt.points.len(), f1));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    let base = samples.len() / group_count;
    let rem = samples.len() % group_count;
    let mut groups = Vec::with_capacity(group_count);
    let mut start = 0;
    for g in 0..group_count {
        let len = base + usize::from(g < rem);
        let slice = &scored[start..start + len];
        groups.push(DensityGroup {
            len,
            mean_count: slice.iter().map(|s| s.0 as f64).sum::<f64>() / len as f64,
            mean_f1: slice.iter().map(|s| s.1).sum::<f64>() / len as f64,
        });
        start += len;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ps(points: Vec<(f64, f64)>) -> PointSet {
        PointSet::new(points, (100, 100)).unwrap()
    }

    #[test]
    fn identical_sets_match_perfectly() {
        let gt = ps(vec![(1.0, 2.0), (30.0, 40.0), (7.5, 9.25)]);
        let mr = match_points(&gt, &gt, 3.0).unwrap();
        assert_eq!((mr.tp, mr.fp, mr.missed), (3, 0, 0));
        assert_eq!(precision_recall_f1(&mr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction_counts_as_misses() {
        let gt = ps(vec![(1.0, 2.0), (3.0, 4.0)]);
        let mr = match_points(&ps(vec![]), &gt, 3.0).unwrap();
        assert_eq!((mr.tp, mr.fp, mr.missed), (0, 0, 2));
        let (p, r, f1) = precision_recall_f1(&mr);
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partial_match_example() {
        let gt = ps(vec![(0.0, 0.0), (10.0, 10.0)]);
        let pred = ps(vec![(1.0, 0.0), (50.0, 50.0)]);
        let mr = match_points(&pred, &gt, 3.0).unwrap();
        assert_eq!((mr.tp, mr.fp, mr.missed), (1, 1, 1));
        assert_eq!(mr.pairs, vec![(0, 0, 1.0)]);
        let (p, r, f1) = precision_recall_f1(&mr);
        assert_eq!((p, r, f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_both_gives_perfect_recall() {
        let mr = match_points(&ps(vec![]), &ps(vec![]), 3.0).unwrap();
        let (p, r, f1) = precision_recall_f1(&mr);
        assert_eq!(p, 0.0);
        assert_eq!(r, 1.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn greedy_prefers_closest_pair() {
        // Two predictions near one gt point: the closer wins, the other
        // pairs with the remaining gt point if within reach.
        let gt = ps(vec![(0.0, 0.0), (0.0, 5.0)]);
        let pred = ps(vec![(0.0, 1.0), (0.0, 0.5)]);
        let mr = match_points(&pred, &gt, 6.0).unwrap();
        assert_eq!(mr.tp, 2);
        // pred 1 is 0.5 away from gt 0 — matched first.
        assert!(mr.pairs.contains(&(1, 0, 0.5)));
        assert!(mr.pairs.iter().any(|&(pi, gi, _)| pi == 0 && gi == 1));
    }

    #[test]
    fn optimal_matching_beats_greedy_on_crossing_case() {
        // Greedy takes the 1.0 pair and strands the second prediction;
        // optimal pairs both.
        let gt = ps(vec![(0.0, 1.0), (0.0, 2.4)]);
        let pred = ps(vec![(0.0, 2.0), (0.0, 4.0)]);
        let greedy = match_points(&pred, &gt, 2.0).unwrap();
        let optimal = match_points_optimal(&pred, &gt, 2.0).unwrap();
        assert_eq!(greedy.tp, 1);
        assert_eq!(optimal.tp, 2);
    }

    #[test]
    fn threshold_must_be_positive() {
        assert!(match_points(&ps(vec![]), &ps(vec![]), 0.0).is_err());
    }

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae_rmse(&[361.0], &[365.0]).unwrap(), (4.0, 4.0));
        assert_eq!(mae_rmse(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_rmse(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), (2.0, 2.0));
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_rmse(&[], &[]).is_err());
    }

    #[test]
    fn density_groups_are_ranked_and_near_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for _ in 0..33 {
            let k = rng.random_range(0..30usize);
            let pts: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random::<f64>() * 99.0, rng.random::<f64>() * 99.0))
                .collect();
            samples.push((ps(pts.clone()), ps(pts)));
        }
        let groups = density_group_analysis(&samples, 10, 3.0).unwrap();
        assert_eq!(groups.len(), 10);
        assert_eq!(groups.iter().map(|g| g.len).sum::<usize>(), 33);
        for w in groups.windows(2) {
            assert!(w[0].mean_count <= w[1].mean_count);
            assert!(w[0].len >= w[1].len && w[0].len - w[1].len <= 1);
        }
        // Identical pred/gt → F1 = 1 everywhere.
        for g in &groups {
            assert!((g.mean_f1 - 1.0).abs() < 1e-12);
        }
        assert!(density_group_analysis(&samples, 40, 3.0).is_err());
        let single = density_group_analysis(&samples, 1, 3.0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len, 33);
    }

    proptest! {
        #[test]
        fn matching_is_one_to_one_and_bounded(
            seed in 0u64..500,
            np in 0usize..12,
            ng in 0usize..12,
            thr in 0.5f64..20.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_pts = |rng: &mut ChaCha8Rng, k: usize| -> PointSet {
                ps((0..k).map(|_| (rng.random::<f64>() * 99.0, rng.random::<f64>() * 99.0)).collect())
            };
            let pred = rand_pts(&mut rng, np);
            let gt = rand_pts(&mut rng, ng);
            let mr = match_points(&pred, &gt, thr).unwrap();
            prop_assert_eq!(mr.tp, mr.pairs.len());
            prop_assert_eq!(mr.tp + mr.fp, np);
            prop_assert_eq!(mr.tp + mr.missed, ng);
            let mut seen_p = std::collections::HashSet::new();
            let mut seen_g = std::collections::HashSet::new();
            for &(pi, gi, d) in &mr.pairs {
                prop_assert!(seen_p.insert(pi));
                prop_assert!(seen_g.insert(gi));
                prop_assert!(d <= thr);
            }
            // Shrinking the threshold never increases tp.
            let tighter = match_points(&pred, &gt, thr * 0.5).unwrap();
            prop_assert!(tighter.tp <= mr.tp);
            // Optimal matching is an upper bound on greedy cardinality.
            let optimal = match_points_optimal(&pred, &gt, thr).unwrap();
            prop_assert!(optimal.tp >= mr.tp);
            // F1 bounds and the exactness condition.
            let (_, _, f1) = precision_recall_f1(&mr);
            prop_assert!((0.0..=1.0).contains(&f1));
            if f1 == 1.0 {
                prop_assert!(mr.fp == 0 && mr.missed == 0 && mr.tp > 0);
            }
            // MAE ≤ RMSE on the induced counts.
            if ng > 0 {
                let (mae, rmse) = mae_rmse(&[ng as f64], &[np as f64]).unwrap();
                prop_assert!(mae <= rmse + 1e-12);
            }
        }
    }
}
