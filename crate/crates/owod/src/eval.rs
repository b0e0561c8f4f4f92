//! Open-world evaluation: detection assembly, top-k selection,
//! known/unknown labeling, and the metric suite (mAP@0.5 split by
//! previously/currently known, unknown recall, wilderness impact, absolute
//! open-set error).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{combine_scores, LayerOutputs};
use crate::protocol::{VisibleAnnotation, VisibleClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetLabel {
    Known(u32),
    Unknown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub query_index: usize,
    pub bbox: BBox,
    pub label: DetLabel,
    /// Fused score of the winning class.
    pub score: f64,
    pub objectness: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Exponent on objectness in the fused score.
    pub gamma: f64,
    pub top_k: usize,
    pub known_threshold: f64,
    pub unknown_threshold: f64,
    /// Recall level at which wilderness impact is read off.
    pub wi_recall_level: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            top_k: 100,
            known_threshold: 0.05,
            unknown_threshold: 0.05,
            wi_recall_level: 0.8,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub task: usize,
    pub num_images: usize,
    /// mAP@0.5 over classes known before this task; absent at the first task.
    pub map_previously_known: Option<f64>,
    /// mAP@0.5 over this task's classes.
    pub map_currently_known: Option<f64>,
    /// mAP@0.5 over all known classes (mean over the union, not of the two
    /// sub-means).
    pub map_both: Option<f64>,
    /// Recall over unknown ground truth; absent when no unknown GT exists.
    pub u_recall: Option<f64>,
    /// Wilderness impact at the configured recall level; absent when the
    /// precision is degenerate.
    pub wilderness_impact: Option<f64>,
    pub a_ose: u64,
}

/// Label one query given its fused per-class scores and objectness:
/// the argmax class when its score clears the known threshold, otherwise
/// unknown when objectness clears its threshold, otherwise discarded.
pub fn classify_detection(
    class_scores: &[f64],
    objectness: f64,
    known_threshold: f64,
    unknown_threshold: f64,
) -> Option<(DetLabel, f64)> {
    let (best_idx, best) = class_scores
        .iter()
        .copied()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if best >= known_threshold {
        Some((DetLabel::Known(best_idx as u32), best))
    } else if objectness >= unknown_threshold {
        Some((DetLabel::Unknown, best))
    } else {
        None
    }
}

/// Keep the `k` highest-scoring candidates; ties break toward the lower
/// query index. Input order is preserved for the survivors.
pub fn select_topk<T, F: Fn(&T) -> (f64, usize)>(candidates: Vec<T>, k: usize, key: F) -> Vec<T> {
    if candidates.len() <= k {
        return candidates;
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, qa) = key(&candidates[a]);
        let (sb, qb) = key(&candidates[b]);
        sb.partial_cmp(&sa).unwrap().then(qa.cmp(&qb))
    });
    let keep: std::collections::BTreeSet<usize> = order.into_iter().take(k).collect();
    candidates
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| keep.contains(&i).then_some(c))
        .collect()
}

/// Turn one image's model outputs into labeled detections. The class-head
/// column of an output maps to a class id through `head_classes`.
pub fn detections_for_image(
    outputs: &LayerOutputs,
    image_id: u64,
    head_classes: &[u32],
    cfg: &EvalConfig,
) -> Vec<Detection> {
    struct Candidate {
        query_index: usize,
        bbox: BBox,
        class_scores: Vec<f64>,
        score: f64,
        objectness: f64,
    }
    let num_queries = outputs.boxes.len();
    let mut candidates = Vec::with_capacity(num_queries);
    for q in 0..num_queries {
        let p_obj = outputs.objectness[q];
        let class_scores: Vec<f64> = (0..head_classes.len())
            .map(|c| combine_scores(p_obj, outputs.class_probs[[q, c]], cfg.gamma))
            .collect();
        let score = class_scores.iter().copied().fold(0.0f64, f64::max);
        candidates.push(Candidate {
            query_index: q,
            bbox: outputs.boxes[q],
            class_scores,
            score,
            objectness: p_obj,
        });
    }
    let kept = select_topk(candidates, cfg.top_k, |c| (c.score, c.query_index));
    kept.into_iter()
        .filter_map(|c| {
            classify_detection(
                &c.class_scores,
                c.objectness,
                cfg.known_threshold,
                cfg.unknown_threshold,
            )
            .map(|(label, score)| Detection {
                image_id,
                query_index: c.query_index,
                bbox: c.bbox,
                label: match label {
                    DetLabel::Known(col) => DetLabel::Known(head_classes[col as usize]),
                    DetLabel::Unknown => DetLabel::Unknown,
                },
                score,
                objectness: c.objectness,
            })
        })
        .collect()
}

/// Ground truth for one image at evaluation time.
#[derive(Debug, Clone)]
pub struct ImageGt {
    pub image_id: u64,
    pub annotations: Vec<VisibleAnnotation>,
}

fn sort_by_score(detections: &mut [&Detection]) {
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.query_index.cmp(&b.query_index))
    });
}

/// All-point interpolated average precision for one class at one IoU
/// threshold, with greedy highest-score-first matching and one match per
/// ground-truth box. Returns `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    gt: &[ImageGt],
    class_id: u32,
    iou_threshold: f64,
) -> Option<f64> {
    let mut gt_boxes: BTreeMap<u64, Vec<(BBox, bool)>> = BTreeMap::new();
    for image in gt {
        for ann in &image.annotations {
            if ann.class == VisibleClass::Known(class_id) {
                gt_boxes
                    .entry(image.image_id)
                    .or_default()
                    .push((ann.bbox, false));
            }
        }
    }
    let num_gt: usize = gt_boxes.values().map(|v| v.len()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.label == DetLabel::Known(class_id))
        .collect();
    sort_by_score(&mut dets);

    let mut tp_flags = Vec::with_capacity(dets.len());
    for det in &dets {
        let mut matched = false;
        if let Some(boxes) = gt_boxes.get_mut(&det.image_id) {
            let mut best: Option<(usize, f64)> = None;
            for (i, (bbox, used)) in boxes.iter().enumerate() {
                if *used {
                    continue;
                }
                let overlap = iou(&det.bbox, bbox);
                if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((i, overlap));
                }
            }
            if let Some((i, _)) = best {
                boxes[i].1 = true;
                matched = true;
            }
        }
        tp_flags.push(matched);
    }
    Some(ap_from_flags(&tp_flags, num_gt))
}

/// Area under the precision envelope of the cumulative PR curve.
fn ap_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in tp_flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / num_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut ap = 0.0;
    let mut best_prec = 0.0f64;
    for idx in (0..points.len()).rev() {
        let (recall, prec) = points[idx];
        best_prec = best_prec.max(prec);
        let recall_before = if idx == 0 { 0.0 } else { points[idx - 1].0 };
        if recall > recall_before {
            ap += (recall - recall_before) * best_prec;
        }
    }
    ap
}

/// Mean AP over the given classes; classes without ground truth are skipped.
pub fn mean_average_precision(
    detections: &[Detection],
    gt: &[ImageGt],
    classes: &[u32],
    iou_threshold: f64,
) -> Option<f64> {
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| average_precision(detections, gt, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

fn unknown_gt_boxes(gt: &[ImageGt]) -> BTreeMap<u64, Vec<(BBox, bool)>> {
    let mut map: BTreeMap<u64, Vec<(BBox, bool)>> = BTreeMap::new();
    for image in gt {
        for ann in &image.annotations {
            if ann.class == VisibleClass::Unknown {
                map.entry(image.image_id)
                    .or_default()
                    .push((ann.bbox, false));
            }
        }
    }
    map
}

fn greedy_count_matches(
    dets: &[&Detection],
    gt_boxes: &mut BTreeMap<u64, Vec<(BBox, bool)>>,
    iou_threshold: f64,
) -> usize {
    let mut matched = 0usize;
    for det in dets {
        if let Some(boxes) = gt_boxes.get_mut(&det.image_id) {
            let mut best: Option<(usize, f64)> = None;
            for (i, (bbox, used)) in boxes.iter().enumerate() {
                if *used {
                    continue;
                }
                let overlap = iou(&det.bbox, bbox);
                if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((i, overlap));
                }
            }
            if let Some((i, _)) = best {
                boxes[i].1 = true;
                matched += 1;
            }
        }
    }
    matched
}

/// Fraction of unknown ground-truth boxes matched by unknown-labeled
/// detections. `None` when there is no unknown ground truth.
pub fn unknown_recall(
    detections: &[Detection],
    gt: &[ImageGt],
    iou_threshold: f64,
) -> Option<f64> {
    let mut gt_boxes = unknown_gt_boxes(gt);
    let total: usize = gt_boxes.values().map(|v| v.len()).sum();
    if total == 0 {
        return None;
    }
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.label == DetLabel::Unknown)
        .collect();
    sort_by_score(&mut dets);
    let matched = greedy_count_matches(&dets, &mut gt_boxes, iou_threshold);
    Some(matched as f64 / total as f64)
}

/// Number of unknown ground-truth boxes covered by known-labeled
/// detections (each counted once).
pub fn absolute_ose(detections: &[Detection], gt: &[ImageGt], iou_threshold: f64) -> u64 {
    let mut gt_boxes = unknown_gt_boxes(gt);
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| matches!(d.label, DetLabel::Known(_)))
        .collect();
    sort_by_score(&mut dets);
    greedy_count_matches(&dets, &mut gt_boxes, iou_threshold) as u64
}

/// Wilderness impact `P_K / P_(K u U) - 1` at a recall level.
///
/// Known-labeled detections march in score order; a detection is a true
/// positive when it matches a free same-class known box. False positives
/// overlapping unknown ground truth are the ones a closed-set evaluation
/// would never see, so the closed-set precision discounts them. Counts are
/// read at the first rank where recall reaches the requested level (or at
/// the end of the list when it never does).
pub fn wilderness_impact(
    detections: &[Detection],
    gt: &[ImageGt],
    recall_level: f64,
    iou_threshold: f64,
) -> Result<f64> {
    let mut known_boxes: BTreeMap<u64, BTreeMap<u32, Vec<(BBox, bool)>>> = BTreeMap::new();
    let mut total_known_gt = 0usize;
    for image in gt {
        for ann in &image.annotations {
            if let VisibleClass::Known(c) = ann.class {
                known_boxes
                    .entry(image.image_id)
                    .or_default()
                    .entry(c)
                    .or_default()
                    .push((ann.bbox, false));
                total_known_gt += 1;
            }
        }
    }
    let unknown_boxes = unknown_gt_boxes(gt);

    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| matches!(d.label, DetLabel::Known(_)))
        .collect();
    sort_by_score(&mut dets);
    if dets.is_empty() {
        return Err(Error::DegeneratePrecision);
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fp_unknown = 0usize;
    let target = recall_level * total_known_gt as f64;
    for det in &dets {
        let DetLabel::Known(class_id) = det.label else {
            unreachable!()
        };
        let mut matched = false;
        if let Some(classes) = known_boxes.get_mut(&det.image_id) {
            if let Some(boxes) = classes.get_mut(&class_id) {
                let mut best: Option<(usize, f64)> = None;
                for (i, (bbox, used)) in boxes.iter().enumerate() {
                    if *used {
                        continue;
                    }
                    let overlap = iou(&det.bbox, bbox);
                    if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                        best = Some((i, overlap));
                    }
                }
                if let Some((i, _)) = best {
                    boxes[i].1 = true;
                    matched = true;
                }
            }
        }
        if matched {
            tp += 1;
        } else {
            fp += 1;
            let hits_unknown = unknown_boxes
                .get(&det.image_id)
                .map(|boxes| boxes.iter().any(|(b, _)| iou(&det.bbox, b) >= iou_threshold))
                .unwrap_or(false);
            if hits_unknown {
                fp_unknown += 1;
            }
        }
        if total_known_gt > 0 && tp as f64 >= target {
            break;
        }
    }
    let closed_denom = tp + fp - fp_unknown;
    if tp + fp == 0 || closed_denom == 0 || tp == 0 {
        return Err(Error::DegeneratePrecision);
    }
    let p_known = tp as f64 / closed_denom as f64;
    let p_open = tp as f64 / (tp + fp) as f64;
    Ok(p_known / p_open - 1.0)
}

/// Assemble the full report for one task's evaluation split.
pub fn evaluate(
    detections: &[Detection],
    gt: &[ImageGt],
    previously_known: &[u32],
    currently_known: &[u32],
    task: usize,
    cfg: &EvalConfig,
) -> MetricReport {
    let all_known: Vec<u32> = {
        let mut v: Vec<u32> = previously_known
            .iter()
            .chain(currently_known.iter())
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    MetricReport {
        task,
        num_images: gt.len(),
        map_previously_known: mean_average_precision(
            detections,
            gt,
            previously_known,
            cfg.iou_threshold,
        ),
        map_currently_known: mean_average_precision(
            detections,
            gt,
            currently_known,
            cfg.iou_threshold,
        ),
        map_both: mean_average_precision(detections, gt, &all_known, cfg.iou_threshold),
        u_recall: unknown_recall(detections, gt, cfg.iou_threshold),
        wilderness_impact: wilderness_impact(
            detections,
            gt,
            cfg.wi_recall_level,
            cfg.iou_threshold,
        )
        .ok(),
        a_ose: absolute_ose(detections, gt, cfg.iou_threshold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, q: usize, bbox: BBox, label: DetLabel, score: f64) -> Detection {
        Detection {
            image_id,
            query_index: q,
            bbox,
            label,
            score,
            objectness: score,
        }
    }

    fn gt_image(image_id: u64, anns: Vec<(VisibleClass, BBox)>) -> ImageGt {
        ImageGt {
            image_id,
            annotations: anns
                .into_iter()
                .map(|(class, bbox)| VisibleAnnotation { class, bbox })
                .collect(),
        }
    }

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn classify_rules() {
        // saturated known-class score
        let got = classify_detection(&[0.9, 0.1], 0.5, 0.05, 0.05).unwrap();
        assert_eq!(got.0, DetLabel::Known(0));
        // all class scores ~0 but objectness high -> unknown
        let got = classify_detection(&[0.001, 0.002], 0.8, 0.05, 0.05).unwrap();
        assert_eq!(got.0, DetLabel::Unknown);
        // everything ~0 -> discarded
        assert!(classify_detection(&[0.001, 0.002], 0.001, 0.05, 0.05).is_none());
    }

    #[test]
    fn topk_tie_breaks_toward_lower_index() {
        let items: Vec<(usize, f64)> = vec![(0, 0.5), (1, 0.9), (2, 0.5), (3, 0.1)];
        let kept = select_topk(items, 2, |&(q, s)| (s, q));
        assert_eq!(kept, vec![(0, 0.5), (1, 0.9)]);
        // k >= n keeps everything
        let items: Vec<(usize, f64)> = (0..5).map(|q| (q, 0.2)).collect();
        assert_eq!(select_topk(items.clone(), 100, |&(q, s)| (s, q)), items);
        // k = 1 takes the argmax
        let items: Vec<(usize, f64)> = vec![(0, 0.3), (1, 0.7), (2, 0.5)];
        assert_eq!(select_topk(items, 1, |&(q, s)| (s, q)), vec![(1, 0.7)]);
    }

    #[test]
    fn ap_simple_cases() {
        let gt = vec![gt_image(0, vec![(VisibleClass::Known(1), b(0.3, 0.3, 0.2, 0.2))])];
        // one detection with IoU >= 0.5 -> AP 1.0
        let dets = vec![det(0, 0, b(0.3, 0.3, 0.2, 0.2), DetLabel::Known(1), 0.9)];
        assert_eq!(average_precision(&dets, &gt, 1, 0.5), Some(1.0));
        // no detections with GT present -> 0
        assert_eq!(average_precision(&[], &gt, 1, 0.5), Some(0.0));
        // no GT for the class -> None
        assert_eq!(average_precision(&dets, &gt, 2, 0.5), None);
    }

    #[test]
    fn ap_three_detections_two_gt_hand_case() {
        // ranked: TP, FP, TP -> PR points (0.5,1.0), (0.5,0.5), (1.0,2/3)
        // envelope area = 0.5 * 1.0 + 0.5 * 2/3 = 5/6
        let g1 = b(0.2, 0.2, 0.2, 0.2);
        let g2 = b(0.7, 0.7, 0.2, 0.2);
        let gt = vec![gt_image(
            0,
            vec![
                (VisibleClass::Known(0), g1),
                (VisibleClass::Known(0), g2),
            ],
        )];
        let dets = vec![
            det(0, 0, g1, DetLabel::Known(0), 0.9),
            det(0, 1, b(0.45, 0.45, 0.2, 0.2), DetLabel::Known(0), 0.8),
            det(0, 2, g2, DetLabel::Known(0), 0.7),
        ];
        let ap = average_precision(&dets, &gt, 0, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "got {ap}");
    }

    #[test]
    fn unknown_recall_cases() {
        let u1 = b(0.2, 0.2, 0.2, 0.2);
        let u2 = b(0.7, 0.7, 0.2, 0.2);
        let gt = vec![gt_image(
            0,
            vec![(VisibleClass::Unknown, u1), (VisibleClass::Unknown, u2)],
        )];
        // one of two matched
        let dets = vec![det(0, 0, u1, DetLabel::Unknown, 0.9)];
        assert_eq!(unknown_recall(&dets, &gt, 0.5), Some(0.5));
        // all matched
        let dets = vec![
            det(0, 0, u1, DetLabel::Unknown, 0.9),
            det(0, 1, u2, DetLabel::Unknown, 0.8),
        ];
        assert_eq!(unknown_recall(&dets, &gt, 0.5), Some(1.0));
        // no unknown GT -> sentinel
        let known_only = vec![gt_image(0, vec![(VisibleClass::Known(0), u1)])];
        assert_eq!(unknown_recall(&dets, &known_only, 0.5), None);
    }

    #[test]
    fn a_ose_counts_each_gt_once() {
        let u = b(0.5, 0.5, 0.2, 0.2);
        let gt = vec![gt_image(0, vec![(VisibleClass::Unknown, u)])];
        // two overlapping known-labeled detections on one unknown GT
        let dets = vec![
            det(0, 0, u, DetLabel::Known(0), 0.9),
            det(0, 1, b(0.51, 0.5, 0.2, 0.2), DetLabel::Known(1), 0.8),
        ];
        assert_eq!(absolute_ose(&dets, &gt, 0.5), 1);
        // no overlap -> 0
        let far = vec![det(0, 0, b(0.1, 0.1, 0.1, 0.1), DetLabel::Known(0), 0.9)];
        assert_eq!(absolute_ose(&far, &gt, 0.5), 0);
        // three unknown GT each covered -> 3
        let gt3 = vec![gt_image(
            0,
            vec![
                (VisibleClass::Unknown, b(0.2, 0.2, 0.1, 0.1)),
                (VisibleClass::Unknown, b(0.5, 0.5, 0.1, 0.1)),
                (VisibleClass::Unknown, b(0.8, 0.8, 0.1, 0.1)),
            ],
        )];
        let dets3 = vec![
            det(0, 0, b(0.2, 0.2, 0.1, 0.1), DetLabel::Known(0), 0.9),
            det(0, 1, b(0.5, 0.5, 0.1, 0.1), DetLabel::Known(0), 0.8),
            det(0, 2, b(0.8, 0.8, 0.1, 0.1), DetLabel::Known(1), 0.7),
        ];
        assert_eq!(absolute_ose(&dets3, &gt3, 0.5), 3);
    }

    #[test]
    fn wilderness_impact_cases() {
        let k1 = b(0.2, 0.2, 0.2, 0.2);
        let k2 = b(0.5, 0.2, 0.2, 0.2);
        let u1 = b(0.2, 0.7, 0.2, 0.2);
        let u2 = b(0.5, 0.7, 0.2, 0.2);
        let gt = vec![gt_image(
            0,
            vec![
                (VisibleClass::Known(0), k1),
                (VisibleClass::Known(0), k2),
                (VisibleClass::Unknown, u1),
                (VisibleClass::Unknown, u2),
            ],
        )];
        // no known detection hits unknown GT -> WI = 0
        let clean = vec![
            det(0, 0, k1, DetLabel::Known(0), 0.9),
            det(0, 1, k2, DetLabel::Known(0), 0.8),
        ];
        let wi = wilderness_impact(&clean, &gt, 0.8, 0.5).unwrap();
        assert_eq!(wi, 0.0);

        // half of the known detections cover unknown GT:
        // tp=2, fp=2 (both on unknowns) -> P_K = 2/2 = 1, P_KU = 2/4 = 0.5
        // WI = 1/0.5 - 1 = 1
        let half = vec![
            det(0, 0, k1, DetLabel::Known(0), 0.95),
            det(0, 1, u1, DetLabel::Known(0), 0.9),
            det(0, 2, u2, DetLabel::Known(0), 0.85),
            det(0, 3, k2, DetLabel::Known(0), 0.8),
        ];
        let wi = wilderness_impact(&half, &gt, 1.0, 0.5).unwrap();
        assert!((wi - 1.0).abs() < 1e-12, "got {wi}");

        // degenerate: no known-labeled detections at all
        assert!(matches!(
            wilderness_impact(&[], &gt, 0.8, 0.5),
            Err(Error::DegeneratePrecision)
        ));
    }

    #[test]
    fn ap_is_rank_invariant_under_monotone_score_transform() {
        let gt = vec![gt_image(
            0,
            vec![
                (VisibleClass::Known(0), b(0.2, 0.2, 0.2, 0.2)),
                (VisibleClass::Known(0), b(0.7, 0.7, 0.2, 0.2)),
            ],
        )];
        let dets = vec![
            det(0, 0, b(0.2, 0.21, 0.2, 0.2), DetLabel::Known(0), 0.81),
            det(0, 1, b(0.4, 0.4, 0.2, 0.2), DetLabel::Known(0), 0.5),
            det(0, 2, b(0.7, 0.7, 0.2, 0.2), DetLabel::Known(0), 0.3),
        ];
        let base = average_precision(&dets, &gt, 0, 0.5).unwrap();
        let transformed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: d.score.sqrt() * 0.5 + 0.1,
                ..d.clone()
            })
            .collect();
        let trans = average_precision(&transformed, &gt, 0, 0.5).unwrap();
        assert!((base - trans).abs() < 1e-12);
    }

    #[test]
    fn label_flip_complementarity() {
        // flipping one known-labeled detection to unknown cannot reduce
        // u-recall and cannot raise a-ose
        let u = b(0.5, 0.5, 0.2, 0.2);
        let gt = vec![gt_image(
            0,
            vec![
                (VisibleClass::Unknown, u),
                (VisibleClass::Known(0), b(0.2, 0.2, 0.2, 0.2)),
            ],
        )];
        let before = vec![
            det(0, 0, u, DetLabel::Known(0), 0.9),
            det(0, 1, b(0.2, 0.2, 0.2, 0.2), DetLabel::Known(0), 0.8),
        ];
        let mut after = before.clone();
        after[0].label = DetLabel::Unknown;

        let ur_before = unknown_recall(&before, &gt, 0.5).unwrap();
        let ur_after = unknown_recall(&after, &gt, 0.5).unwrap();
        assert!(ur_after >= ur_before);
        assert!(absolute_ose(&after, &gt, 0.5) <= absolute_ose(&before, &gt, 0.5));
    }

    #[test]
    fn evaluation_is_order_independent() {
        let gt = vec![
            gt_image(0, vec![(VisibleClass::Known(0), b(0.2, 0.2, 0.2, 0.2))]),
            gt_image(1, vec![(VisibleClass::Known(1), b(0.6, 0.6, 0.2, 0.2))]),
            gt_image(2, vec![(VisibleClass::Unknown, b(0.4, 0.7, 0.2, 0.2))]),
        ];
        let dets = vec![
            det(0, 0, b(0.2, 0.2, 0.2, 0.2), DetLabel::Known(0), 0.9),
            det(1, 0, b(0.6, 0.6, 0.2, 0.2), DetLabel::Known(1), 0.8),
            det(2, 0, b(0.4, 0.7, 0.2, 0.2), DetLabel::Unknown, 0.7),
        ];
        let cfg = EvalConfig::default();
        let forward = evaluate(&dets, &gt, &[0], &[1], 1, &cfg);
        let mut gt_rev = gt.clone();
        gt_rev.reverse();
        let mut dets_rev = dets.clone();
        dets_rev.reverse();
        let backward = evaluate(&dets_rev, &gt_rev, &[0], &[1], 1, &cfg);
        assert_eq!(forward, backward);
    }
}
