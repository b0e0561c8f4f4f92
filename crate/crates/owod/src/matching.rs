//! One-to-one assignment between predictions and targets.
//!
//! Two assignments run per image: predictions vs. ground-truth boxes
//! (producing matched and unmatched prediction index sets), and the leftover
//! unmatched predictions vs. pseudo unknown boxes, scored by the geometric
//! matching cost so that high-cost pairs are preferred.

use ndarray::Array2;

use crate::asf;
use crate::geometry::{generalized_iou, l1_distance, BBox};

/// Outcome of assignment over one image's predictions.
///
/// `known`, `unmatched`, and `pseudo` are pairwise disjoint over prediction
/// indices, and every pseudo-matched prediction was previously unmatched.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// (prediction index, ground-truth index)
    pub known: Vec<(usize, usize)>,
    /// prediction indices assigned to background
    pub unmatched: Vec<usize>,
    /// (prediction index, pseudo-label index)
    pub pseudo: Vec<(usize, usize)>,
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`.
///
/// Shortest-augmenting-path formulation with potentials; `O(n^2 m)`.
/// Entries must be finite. Returns pairs sorted by row index.
pub fn hungarian(costs: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = costs.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t = costs.t().to_owned();
        let mut flipped: Vec<(usize, usize)> =
            hungarian(&t).into_iter().map(|(r, c)| (c, r)).collect();
        flipped.sort_unstable();
        return flipped;
    }
    debug_assert!(costs.iter().all(|c| c.is_finite()), "costs must be finite");

    let (n, m) = (rows, cols);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: 1-based row currently assigned to column j; 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = costs[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    result.sort_unstable();
    result
}

/// Assignment cost weights for prediction/ground-truth matching.
#[derive(Debug, Clone, Copy)]
pub struct MatchWeights {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
        }
    }
}

const FOCAL_ALPHA: f64 = 0.25;
const LOG_EPS: f64 = 1e-8;

/// Focal-style classification cost of predicting probability `p` for the
/// target class: positive-term cost minus the negative-term cost saved.
fn focal_class_cost(p: f64) -> f64 {
    let pos = FOCAL_ALPHA * (1.0 - p).powi(2) * -(p + LOG_EPS).ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powi(2) * -(1.0 - p + LOG_EPS).ln();
    pos - neg
}

/// Match predictions with ground truth. Populates `known` and `unmatched`;
/// `pseudo` is left empty for [`match_pseudo`] to fill.
pub fn match_known(
    class_probs: &Array2<f64>,
    pred_boxes: &[BBox],
    gt: &[(BBox, usize)],
    weights: MatchWeights,
) -> MatchResult {
    let num_preds = pred_boxes.len();
    if gt.is_empty() {
        return MatchResult {
            known: Vec::new(),
            unmatched: (0..num_preds).collect(),
            pseudo: Vec::new(),
        };
    }
    let mut costs = Array2::<f64>::zeros((num_preds, gt.len()));
    for i in 0..num_preds {
        for (j, (gt_box, gt_class)) in gt.iter().enumerate() {
            let cls = focal_class_cost(class_probs[[i, *gt_class]]);
            let l1 = l1_distance(&pred_boxes[i], gt_box);
            let giou = generalized_iou(&pred_boxes[i], gt_box);
            costs[[i, j]] = weights.class_weight * cls
                + weights.l1_weight * l1
                + weights.giou_weight * (1.0 - giou);
        }
    }
    let known = hungarian(&costs);
    let assigned: Vec<bool> = {
        let mut v = vec![false; num_preds];
        for &(i, _) in &known {
            v[i] = true;
        }
        v
    };
    MatchResult {
        known,
        unmatched: (0..num_preds).filter(|&i| !assigned[i]).collect(),
        pseudo: Vec::new(),
    }
}

/// Assign pseudo unknown boxes to unmatched predictions, maximizing the
/// total geometric matching cost. Returns (prediction index, pseudo index)
/// pairs, with prediction indices referring to the original prediction list.
pub fn match_pseudo(
    unmatched: &[usize],
    objectness: &[f64],
    pred_boxes: &[BBox],
    pseudo_boxes: &[BBox],
    alpha: f64,
) -> Vec<(usize, usize)> {
    if unmatched.is_empty() || pseudo_boxes.is_empty() {
        return Vec::new();
    }
    let mut costs = Array2::<f64>::zeros((unmatched.len(), pseudo_boxes.len()));
    for (r, &i) in unmatched.iter().enumerate() {
        for (c, pseudo) in pseudo_boxes.iter().enumerate() {
            costs[[r, c]] = -asf::matching_cost(objectness[i], &pred_boxes[i], pseudo, alpha);
        }
    }
    hungarian(&costs)
        .into_iter()
        .map(|(r, c)| (unmatched[r], c))
        .collect()
}
