//! Auxiliary-box supervision pipeline.
//!
//! Auxiliary boxes arrive from an external class-agnostic segmenter (they
//! carry the segmenter's own quality scores as opaque provenance). The
//! pipeline removes boxes overlapping known ground truth, scores the rest
//! with the geometric matching cost `P_obj^alpha * IoU^(1-alpha)`, keeps
//! candidates above a threshold as pseudo unknown labels, and downweights
//! the resulting losses with confidence soft weights `exp(-T * d_M^2)`.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

/// Candidate box ingested from the auxiliary-box file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxiliaryBox {
    pub bbox: BBox,
    pub predicted_iou: Option<f64>,
    pub stability: Option<f64>,
}

impl AuxiliaryBox {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            predicted_iou: None,
            stability: None,
        }
    }
}

/// A filtered pseudo unknown label: a box plus the matching cost that
/// admitted it, and the prediction it gets assigned to once matched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub cost: f64,
    pub matched_prediction: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AsfConfig {
    /// Geometric-mean exponent on the objectness factor.
    pub alpha: f64,
    /// Minimum matching cost for a candidate to become a pseudo label.
    pub threshold: f64,
    /// Candidates whose IoU with any known ground-truth box exceeds this
    /// are discarded before scoring.
    pub known_overlap_cutoff: f64,
    /// Soft-weight temperature.
    pub temperature: f64,
}

impl Default for AsfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            threshold: 0.7,
            known_overlap_cutoff: 0.5,
            temperature: 1.3,
        }
    }
}

/// Drop auxiliary boxes that overlap known ground truth too much.
/// Removal is strict: a candidate at exactly the cutoff is kept.
pub fn remove_known_overlaps(
    candidates: &[AuxiliaryBox],
    known_gt: &[BBox],
    cutoff: f64,
) -> Vec<AuxiliaryBox> {
    candidates
        .iter()
        .filter(|c| known_gt.iter().all(|gt| iou(&c.bbox, gt) <= cutoff))
        .cloned()
        .collect()
}

/// Geometric-mean matching cost `P_obj^alpha * IoU^(1-alpha)` in `[0, 1]`.
///
/// A factor raised to the power 0 contributes 1, so `alpha = 0` collapses to
/// the IoU exactly and `alpha = 1` to the objectness exactly.
pub fn matching_cost(objectness: f64, pred_box: &BBox, aux_box: &BBox, alpha: f64) -> f64 {
    let overlap = iou(pred_box, aux_box);
    objectness.powf(alpha) * overlap.powf(1.0 - alpha)
}

/// Best matching cost of each candidate against any offered prediction.
/// Returns one (candidate index, cost) entry per candidate, in input order.
pub fn score_candidates(
    candidates: &[AuxiliaryBox],
    predictions: &[(f64, BBox)],
    alpha: f64,
) -> Vec<(usize, f64)> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let best = predictions
                .iter()
                .map(|(p_obj, pred_box)| matching_cost(*p_obj, pred_box, &cand.bbox, alpha))
                .fold(0.0f64, f64::max);
            (i, best)
        })
        .collect()
}

/// Score candidates against their best prediction, keep those at or above
/// the threshold, and return them sorted by descending cost.
pub fn filter_pseudo_labels(
    candidates: &[AuxiliaryBox],
    predictions: &[(f64, BBox)],
    config: &AsfConfig,
) -> Vec<PseudoLabel> {
    let mut scored: Vec<(usize, f64)> = score_candidates(candidates, predictions, config.alpha)
        .into_iter()
        .filter(|&(_, cost)| cost >= config.threshold)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .map(|(i, cost)| PseudoLabel {
            bbox: candidates[i].bbox,
            cost,
            matched_prediction: None,
        })
        .collect()
}

/// Confidence weight `exp(-T * d_M^2)` in `(0, 1]`.
pub fn soft_weight(mahalanobis_squared: f64, temperature: f64) -> f64 {
    (-temperature * mahalanobis_squared).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn aux(cx: f64, cy: f64, w: f64, h: f64) -> AuxiliaryBox {
        AuxiliaryBox::new(BBox::new(cx, cy, w, h))
    }

    #[test]
    fn overlap_removal_cases() {
        let gt = vec![BBox::new(0.5, 0.5, 0.4, 0.4)];
        // identical to gt: removed
        let identical = vec![aux(0.5, 0.5, 0.4, 0.4)];
        assert!(remove_known_overlaps(&identical, &gt, 0.5).is_empty());
        // disjoint: kept
        let disjoint = vec![aux(0.1, 0.1, 0.1, 0.1)];
        assert_eq!(remove_known_overlaps(&disjoint, &gt, 0.5).len(), 1);
    }

    #[test]
    fn overlap_exactly_at_cutoff_is_kept() {
        // unit box vs its left half: IoU = 0.5 exactly
        let gt = vec![BBox::new(0.5, 0.5, 1.0, 1.0)];
        let half = vec![aux(0.25, 0.5, 0.5, 1.0)];
        assert!((iou(&half[0].bbox, &gt[0]) - 0.5).abs() < 1e-12);
        assert_eq!(remove_known_overlaps(&half, &gt, 0.5).len(), 1);
    }

    #[test]
    fn matching_cost_examples() {
        let unit = BBox::new(0.5, 0.5, 1.0, 1.0);
        let half = BBox::new(0.25, 0.5, 0.5, 1.0); // IoU 0.25 vs quarter? compute below
        // construct IoU 0.25: unit box vs a quarter: area .25, containment
        let quarter = BBox::new(0.25, 0.25, 0.5, 0.5);
        assert!((iou(&unit, &quarter) - 0.25).abs() < 1e-12);
        let c = matching_cost(0.64, &unit, &quarter, 0.5);
        assert!((c - 0.4).abs() < 1e-12, "sqrt(0.64*0.25) = 0.4, got {c}");

        // fixed point: both factors 1
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            assert!((matching_cost(1.0, &unit, &unit, alpha) - 1.0).abs() < 1e-12);
        }

        // alpha = 0.6, P_obj = 0.9, IoU = 0.3
        let a = BBox::new(0.5, 0.5, 0.3, 1.0);
        let b = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert!((iou(&a, &b) - 0.3).abs() < 1e-12);
        let c = matching_cost(0.9, &a, &b, 0.6);
        assert!((c - 0.5799546134795287).abs() < 1e-12);

        let _ = half;
    }

    #[test]
    fn boundary_collapse_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p_obj: f64 = rng.gen_range(0.0..1.0);
            let a = BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let b = BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            assert_eq!(matching_cost(p_obj, &a, &b, 1.0), p_obj);
            assert_eq!(matching_cost(p_obj, &a, &b, 0.0), iou(&a, &b));
        }
    }

    #[test]
    fn cost_monotone_in_both_factors() {
        let base = BBox::new(0.5, 0.5, 0.4, 0.4);
        let near = BBox::new(0.52, 0.5, 0.4, 0.4);
        let far = BBox::new(0.7, 0.5, 0.4, 0.4);
        assert!(iou(&near, &base) > iou(&far, &base));
        for alpha in [0.25, 0.5, 0.75] {
            assert!(
                matching_cost(0.8, &near, &base, alpha) >= matching_cost(0.8, &far, &base, alpha)
            );
            assert!(
                matching_cost(0.9, &near, &base, alpha) >= matching_cost(0.4, &near, &base, alpha)
            );
        }
    }

    #[test]
    fn filter_threshold_and_ordering() {
        let config = AsfConfig::default();
        let pred_box = BBox::new(0.5, 0.5, 0.2, 0.2);
        let preds = vec![(0.9, pred_box)];
        // candidate costs: 0.9 * iou^0.5 geometric mean against the one pred
        let candidates = vec![
            aux(0.5, 0.5, 0.2, 0.2),   // iou 1.0   -> cost ~0.9487
            aux(0.52, 0.5, 0.2, 0.2),  // high iou  -> above threshold
            aux(0.9, 0.9, 0.15, 0.15), // disjoint  -> cost 0
        ];
        let labels = filter_pseudo_labels(&candidates, &preds, &config);
        assert_eq!(labels.len(), 2);
        assert!(labels[0].cost >= labels[1].cost);
        assert!(labels.iter().all(|l| l.cost >= config.threshold));

        // all below threshold -> empty
        let weak_preds = vec![(0.1, pred_box)];
        assert!(filter_pseudo_labels(&candidates, &weak_preds, &config).is_empty());
    }

    #[test]
    fn filter_improves_precision_on_noisy_candidates() {
        // A trained-model stand-in: predictions sit on 5 true objects with
        // high objectness; 20 background candidates land anywhere.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let true_boxes: Vec<BBox> = (0..5)
            .map(|k| BBox::new(0.1 + 0.18 * k as f64, 0.3 + 0.1 * (k % 2) as f64, 0.12, 0.12))
            .collect();
        let preds: Vec<(f64, BBox)> = true_boxes.iter().map(|b| (0.92, *b)).collect();

        let mut candidates: Vec<AuxiliaryBox> = true_boxes
            .iter()
            .map(|b| aux(b.cx + 0.005, b.cy, b.w, b.h))
            .collect();
        for _ in 0..20 {
            candidates.push(aux(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            ));
        }
        let is_true = |b: &BBox| true_boxes.iter().any(|t| iou(t, b) > 0.5);

        let config = AsfConfig::default();
        let filtered = filter_pseudo_labels(&candidates, &preds, &config);
        let raw: Vec<&AuxiliaryBox> = candidates.iter().collect();

        let precision_filtered = filtered.iter().filter(|l| is_true(&l.bbox)).count() as f64
            / filtered.len().max(1) as f64;
        let precision_raw =
            raw.iter().filter(|c| is_true(&c.bbox)).count() as f64 / raw.len() as f64;
        assert!(!filtered.is_empty());
        assert!(
            precision_filtered > precision_raw,
            "filtered {precision_filtered} vs raw {precision_raw}"
        );
    }

    #[test]
    fn soft_weight_values_and_monotonicity() {
        assert_eq!(soft_weight(0.0, 1.3), 1.0);
        assert!((soft_weight(1.0, 1.3) - 0.2725317930340126).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let w = soft_weight(k as f64 * 0.37, 1.3);
            assert!(w < prev);
            assert!(w > 0.0 && w <= 1.0);
            prev = w;
        }
    }

    #[test]
    fn raising_threshold_never_admits_more() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let preds: Vec<(f64, BBox)> = (0..6)
            .map(|_| {
                (
                    rng.gen_range(0.2..1.0),
                    BBox::new(
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.05..0.3),
                        rng.gen_range(0.05..0.3),
                    ),
                )
            })
            .collect();
        let candidates: Vec<AuxiliaryBox> = (0..30)
            .map(|_| {
                aux(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                )
            })
            .collect();
        let mut prev = usize::MAX;
        for threshold in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let config = AsfConfig {
                threshold,
                ..AsfConfig::default()
            };
            let n = filter_pseudo_labels(&candidates, &preds, &config).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn filter_output_is_subset_of_overlap_removal() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let known: Vec<BBox> = (0..3)
            .map(|k| BBox::new(0.2 + 0.3 * k as f64, 0.5, 0.2, 0.2))
            .collect();
        let candidates: Vec<AuxiliaryBox> = (0..40)
            .map(|_| {
                aux(
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.05..0.35),
                    rng.gen_range(0.05..0.35),
                )
            })
            .collect();
        let config = AsfConfig {
            threshold: 0.3,
            ..AsfConfig::default()
        };
        let survivors = remove_known_overlaps(&candidates, &known, config.known_overlap_cutoff);
        let preds: Vec<(f64, BBox)> = survivors.iter().map(|c| (0.8, c.bbox)).collect();
        let labels = filter_pseudo_labels(&survivors, &preds, &config);
        for label in &labels {
            assert!(known
                .iter()
                .all(|gt| iou(&label.bbox, gt) <= config.known_overlap_cutoff));
        }
    }
}
