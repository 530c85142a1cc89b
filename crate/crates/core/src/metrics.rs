//! Matching stability metrics and average precision.

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::matching::MatchResult;
use crate::network::Prediction;
use crate::synthdata::GroundTruth;

/// For each validation scene (keyed by its seed), the query index matched to
/// each GT, or `None` when the GT went unmatched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchSnapshot {
    scenes: Vec<(u64, Vec<Option<usize>>)>,
}

impl MatchSnapshot {
    pub fn new(mut scenes: Vec<(u64, Vec<Option<usize>>)>) -> Self {
        scenes.sort_by_key(|(seed, _)| *seed);
        Self { scenes }
    }

    pub fn from_matches<'a>(entries: impl IntoIterator<Item = (u64, &'a MatchResult)>) -> Self {
        Self::new(
            entries
                .into_iter()
                .map(|(seed, m)| (seed, (0..m.num_gts).map(|g| m.query_for_gt(g)).collect()))
                .collect(),
        )
    }

    pub fn num_objects(&self) -> usize {
        self.scenes.iter().map(|(_, v)| v.len()).sum()
    }

    fn agreement(&self, other: &Self) -> Result<(usize, usize)> {
        if self.scenes.len() != other.scenes.len() {
            return Err(Error::SnapshotMismatch(format!("{} vs {} scenes", self.scenes.len(), other.scenes.len())));
        }
        let (mut same, mut total) = (0, 0);
        for ((sa, a), (sb, b)) in self.scenes.iter().zip(&other.scenes) {
            if sa != sb || a.len() != b.len() {
                return Err(Error::SnapshotMismatch(format!("scene {sa} ({} GTs) vs scene {sb} ({} GTs)", a.len(), b.len())));
            }
            same += a.iter().zip(b).filter(|(x, y)| x == y).count();
            total += a.len();
        }
        Ok((same, total))
    }
}

/// Fraction of GT objects whose matched query changed between two snapshots.
pub fn instability(prev: &MatchSnapshot, curr: &MatchSnapshot) -> Result<f64> {
    let (same, total) = prev.agreement(curr)?;
    Ok(if total == 0 { 0.0 } else { (total - same) as f64 / total as f64 })
}

/// Fraction of GT objects matched to the same query by both models.
pub fn consistency(student: &MatchSnapshot, teacher: &MatchSnapshot) -> Result<f64> {
    let (same, total) = student.agreement(teacher)?;
    Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Area under the 101-point interpolated precision/recall curve, averaged
/// over classes that have at least one GT and over `iou_thresholds`.
///
/// Every (query, class) pair of a prediction is a detection scored by that
/// class's probability. Detections are ranked by score (ties keep input
/// order) and greedily claim the highest-IoU unclaimed GT of their class in
/// the same scene.
pub fn average_precision(
    preds_per_scene: &[Vec<Prediction>],
    gts_per_scene: &[Vec<GroundTruth>],
    iou_thresholds: &[f64],
) -> f64 {
    assert_eq!(preds_per_scene.len(), gts_per_scene.len(), "one prediction list per scene");
    let num_classes = preds_per_scene
        .iter()
        .flatten()
        .map(|p| p.scores.len())
        .chain(gts_per_scene.iter().flatten().map(|g| g.class + 1))
        .max()
        .unwrap_or(0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for class in 0..num_classes {
        let n_gt: usize = gts_per_scene.iter().map(|g| g.iter().filter(|o| o.class == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        // (score, scene, query)
        let mut dets: Vec<(f64, usize, usize)> = preds_per_scene
            .iter()
            .enumerate()
            .flat_map(|(s, ps)| ps.iter().enumerate().map(move |(q, p)| (p.scores[class], s, q)))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        for &thr in iou_thresholds {
            sum += class_ap(&dets, preds_per_scene, gts_per_scene, class, n_gt, thr);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn class_ap(
    dets: &[(f64, usize, usize)],
    preds: &[Vec<Prediction>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    n_gt: usize,
    thr: f64,
) -> f64 {
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (k, &(_, s, q)) in dets.iter().enumerate() {
        let b = preds[s][q].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if g.class != class || claimed[s][j] {
                continue;
            }
            let v = iou(b, g.bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            claimed[s][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // make precision monotone non-increasing from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut area = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < level - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            area += precision[idx];
        }
    }
    area / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snap(v: &[&[Option<usize>]]) -> MatchSnapshot {
        MatchSnapshot::new(v.iter().enumerate().map(|(i, x)| (i as u64, x.to_vec())).collect())
    }

    #[test]
    fn instability_examples() {
        let a = snap(&[&[Some(0), Some(1)], &[Some(3), Some(4)]]);
        let b = snap(&[&[Some(0), Some(2)], &[Some(3), Some(4)]]);
        let c = snap(&[&[Some(5), Some(6)], &[Some(7), None]]);
        assert_eq!(instability(&a, &a).unwrap(), 0.0);
        assert_eq!(instability(&a, &b).unwrap(), 0.25);
        assert_eq!(instability(&a, &c).unwrap(), 1.0);
        assert!(instability(&a, &snap(&[&[Some(0)]])).is_err());
    }

    #[test]
    fn consistency_examples() {
        let a = snap(&[&[Some(0), Some(1)], &[Some(3), Some(4)]]);
        let half = snap(&[&[Some(0), Some(9)], &[Some(3), Some(8)]]);
        let none = snap(&[&[Some(1), Some(0)], &[Some(4), Some(3)]]);
        assert_eq!(consistency(&a, &a).unwrap(), 1.0);
        assert_eq!(consistency(&a, &half).unwrap(), 0.5);
        assert_eq!(consistency(&a, &none).unwrap(), 0.0);
    }

    #[test]
    fn snapshots_ignore_scene_order() {
        let a = MatchSnapshot::new(vec![(7, vec![Some(1)]), (3, vec![Some(2), Some(0)])]);
        let b = MatchSnapshot::new(vec![(3, vec![Some(2), Some(1)]), (7, vec![Some(1)])]);
        let b_rev = MatchSnapshot::new(vec![(7, vec![Some(1)]), (3, vec![Some(2), Some(1)])]);
        assert_eq!(instability(&a, &b).unwrap(), instability(&a, &b_rev).unwrap());
        assert!((instability(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    fn gt(b: BBox, class: usize) -> GroundTruth {
        GroundTruth { bbox: b, class }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = vec![gt(BBox::new(0.3, 0.3, 0.2, 0.2), 0), gt(BBox::new(0.7, 0.6, 0.3, 0.2), 1)];
        let perfect: Vec<Prediction> = g
            .iter()
            .map(|o| {
                let mut scores = vec![0.0; 2];
                scores[o.class] = 1.0;
                Prediction { bbox: o.bbox, scores }
            })
            .collect();
        let t = coco_thresholds();
        assert!((average_precision(&[perfect], std::slice::from_ref(&g), &t) - 1.0).abs() < 1e-12);
        assert_eq!(average_precision(&[vec![]], &[g], &t), 0.0);
    }

    #[test]
    fn one_hit_one_miss_is_101_point_half() {
        let g = vec![gt(BBox::new(0.3, 0.3, 0.2, 0.2), 0), gt(BBox::new(0.7, 0.7, 0.2, 0.2), 0)];
        let preds = vec![
            Prediction { bbox: BBox::new(0.3, 0.3, 0.2, 0.2), scores: vec![0.9] },
            Prediction { bbox: BBox::new(0.1, 0.9, 0.1, 0.1), scores: vec![0.6] },
        ];
        // recall reaches 0.5 at precision 1, never more: levels 0.00..=0.50 count
        let ap = average_precision(&[preds], &[g], &[0.5]);
        assert!((ap - 51.0 / 101.0).abs() < 1e-12, "{ap}");
    }

    /// All-points interpolated AP by brute force over each recall level.
    fn brute_force_101(hits: &[bool], n_gt: usize) -> f64 {
        let mut pts = Vec::new();
        let mut tp = 0;
        for (k, &h) in hits.iter().enumerate() {
            tp += h as usize;
            pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        (0..=100)
            .map(|r| {
                let level = r as f64 / 100.0;
                pts.iter().filter(|(rc, _)| *rc >= level - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    #[test]
    fn matches_brute_force_on_isolated_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            // far-apart GTs so every hit is unambiguous
            let n = rng.gen_range(1..6);
            let g: Vec<GroundTruth> = (0..n).map(|k| gt(BBox::new(0.1 + 0.18 * k as f64, 0.5, 0.1, 0.1), 0)).collect();
            let m = rng.gen_range(1..9);
            let mut preds = Vec::new();
            for _ in 0..m {
                let hit = rng.gen_bool(0.6);
                let k = rng.gen_range(0..n);
                let b = if hit { g[k].bbox } else { BBox::new(0.5, 0.1, 0.05, 0.05) };
                preds.push(Prediction { bbox: b, scores: vec![rng.gen_range(0.0..1.0)] });
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| preds[b].scores[0].total_cmp(&preds[a].scores[0]));
            let mut claimed = vec![false; n];
            let hits: Vec<bool> = order
                .iter()
                .map(|&i| match g.iter().position(|o| o.bbox == preds[i].bbox) {
                    Some(j) if !claimed[j] => {
                        claimed[j] = true;
                        true
                    }
                    _ => false,
                })
                .collect();
            let want = brute_force_101(&hits, n);
            let got = average_precision(&[preds], &[g], &[0.5]);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn ap_invariant_to_monotone_rescaling(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..3 {
                let g: Vec<GroundTruth> = (0..rng.gen_range(1..4))
                    .map(|_| gt(BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2), rng.gen_range(0..2)))
                    .collect();
                let p: Vec<Prediction> = (0..5)
                    .map(|_| Prediction {
                        bbox: BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2),
                        scores: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                    })
                    .collect();
                gts.push(g);
                preds.push(p);
            }
            let squashed: Vec<Vec<Prediction>> = preds
                .iter()
                .map(|ps| ps.iter().map(|p| Prediction { bbox: p.bbox, scores: p.scores.iter().map(|s| s * s * 0.5 + 0.1).collect() }).collect())
                .collect();
            let t = coco_thresholds();
            prop_assert_eq!(average_precision(&preds, &gts, &t), average_precision(&squashed, &gts, &t));
        }

        #[test]
        fn self_comparison_identities(v in proptest::collection::vec(proptest::collection::vec(proptest::option::of(0usize..10), 0..5), 0..6)) {
            let s = MatchSnapshot::new(v.into_iter().enumerate().map(|(i, x)| (i as u64, x)).collect());
            prop_assert_eq!(instability(&s, &s).unwrap(), 0.0);
            prop_assert_eq!(consistency(&s, &s).unwrap(), 1.0);
        }
    }
}
