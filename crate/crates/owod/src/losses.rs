//! Training objectives.
//!
//! Detection losses (sigmoid focal classification, L1 + generalized-IoU
//! regression) apply at every decoder layer after the first, using the
//! final-layer assignment. The objectness loss is the sum of squared
//! Mahalanobis distances of known-matched query embeddings at the
//! objectness layer. The auxiliary losses repeat the objectness and L1
//! terms over pseudo-matched queries, scaled by detached confidence
//! weights; gradient flows through the distance factors only.

use ndarray::{Array2, IxDyn};
use owod_grad::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::ObjectnessModel;

pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub obj: f64,
    pub obj_pse: f64,
    pub reg_pse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            obj: 8e-4,
            obj_pse: 8e-5,
            reg_pse: 5.0,
        }
    }
}

/// Per-term values after normalization, plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub reg_l1: f64,
    pub reg_giou: f64,
    pub obj: f64,
    pub obj_pse: f64,
    pub reg_pse: f64,
    pub total: f64,
    pub num_gt: usize,
    pub num_pseudo: usize,
}

/// Accumulates unnormalized per-image loss terms across a batch.
#[derive(Default)]
pub struct LossTerms {
    pub cls: Vec<Var>,
    pub l1: Vec<Var>,
    pub giou: Vec<Var>,
    pub obj: Vec<Var>,
    pub obj_pse: Vec<Var>,
    pub reg_pse: Vec<Var>,
    pub num_gt: usize,
    pub num_pseudo: usize,
}

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    /// Normalize, weight, and sum every term. Detection and objectness
    /// terms divide by the batch ground-truth count, pseudo terms by the
    /// batch pseudo-match count (1 when empty).
    pub fn finish(self, tape: &mut Tape, weights: &LossWeights) -> (Var, LossReport) {
        let gt_norm = 1.0 / self.num_gt.max(1) as f64;
        let pse_norm = 1.0 / self.num_pseudo.max(1) as f64;
        let cls = normalized_sum(tape, &self.cls, gt_norm);
        let l1 = normalized_sum(tape, &self.l1, gt_norm);
        let giou = normalized_sum(tape, &self.giou, gt_norm);
        let obj = normalized_sum(tape, &self.obj, gt_norm);
        let obj_pse = normalized_sum(tape, &self.obj_pse, pse_norm);
        let reg_pse = normalized_sum(tape, &self.reg_pse, pse_norm);

        let mut total = tape.scalar_constant(0.0);
        for (term, weight) in [
            (cls, weights.cls),
            (l1, weights.l1),
            (giou, weights.giou),
            (obj, weights.obj),
            (obj_pse, weights.obj_pse),
            (reg_pse, weights.reg_pse),
        ] {
            let scaled = tape.scale(term, weight);
            total = tape.add(total, scaled);
        }
        let report = LossReport {
            cls: tape.scalar(cls),
            reg_l1: tape.scalar(l1),
            reg_giou: tape.scalar(giou),
            obj: tape.scalar(obj),
            obj_pse: tape.scalar(obj_pse),
            reg_pse: tape.scalar(reg_pse),
            total: tape.scalar(total),
            num_gt: self.num_gt,
            num_pseudo: self.num_pseudo,
        };
        (total, report)
    }
}

fn normalized_sum(tape: &mut Tape, terms: &[Var], norm: f64) -> Var {
    match terms {
        [] => tape.scalar_constant(0.0),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &t in rest {
                acc = tape.add(acc, t);
            }
            tape.scale(acc, norm)
        }
    }
}

/// Sigmoid focal loss over all query/class cells of one layer's logits;
/// matched cells are positives, everything else background. Unnormalized.
pub fn focal_classification_term(
    tape: &mut Tape,
    logits: Var,
    matched: &[(usize, usize)],
    gt_classes: &[usize],
    num_queries: usize,
    num_classes: usize,
) -> Var {
    let mut mask = Array2::<f64>::zeros((num_queries, num_classes));
    for &(pred, gt) in matched {
        mask[[pred, gt_classes[gt]]] = 1.0;
    }
    let inv_mask = mask.mapv(|m| 1.0 - m);
    let mask = tape.constant(mask.into_dyn());
    let inv_mask = tape.constant(inv_mask.into_dyn());

    let p = tape.sigmoid(logits);
    let one = tape.constant(Tensor::from_elem(
        IxDyn(&[num_queries, num_classes]),
        1.0,
    ));
    // positives: alpha * (1-p)^2 * -ln p, with -ln p = softplus(-z)
    let one_minus_p = tape.sub(one, p);
    let omp_sq = tape.mul(one_minus_p, one_minus_p);
    let neg_z = tape.scale(logits, -1.0);
    let nlp = tape.softplus(neg_z);
    let pos_raw = tape.mul(omp_sq, nlp);
    let pos_masked = tape.mul(pos_raw, mask);
    let pos = tape.scale(pos_masked, FOCAL_ALPHA);
    // negatives: (1-alpha) * p^2 * -ln(1-p), with -ln(1-p) = softplus(z)
    let p_sq = tape.mul(p, p);
    let nl1p = tape.softplus(logits);
    let neg_raw = tape.mul(p_sq, nl1p);
    let neg_masked = tape.mul(neg_raw, inv_mask);
    let neg = tape.scale(neg_masked, 1.0 - FOCAL_ALPHA);

    let both = tape.add(pos, neg);
    tape.sum_all(both)
}

/// L1 and (1 - generalized IoU) sums over matched prediction/target pairs
/// of one layer. Unnormalized.
pub fn box_regression_terms(
    tape: &mut Tape,
    boxes: Var,
    matched: &[(usize, usize)],
    gt_boxes: &[BBox],
) -> (Var, Var) {
    if matched.is_empty() {
        return (tape.scalar_constant(0.0), tape.scalar_constant(0.0));
    }
    let pred_idx: Vec<usize> = matched.iter().map(|&(p, _)| p).collect();
    let targets: Vec<&BBox> = matched.iter().map(|&(_, g)| &gt_boxes[g]).collect();
    let m = matched.len();

    let pred = tape.gather_rows(boxes, &pred_idx);
    let mut target = Array2::<f64>::zeros((m, 4));
    for (r, b) in targets.iter().enumerate() {
        target[[r, 0]] = b.cx;
        target[[r, 1]] = b.cy;
        target[[r, 2]] = b.w;
        target[[r, 3]] = b.h;
    }
    let target = tape.constant(target.into_dyn());

    let diff = tape.sub(pred, target);
    let absdiff = tape.abs(diff);
    let l1 = tape.sum_all(absdiff);

    let giou = generalized_iou_vector(tape, pred, target, m);
    let ones = tape.constant(Tensor::from_elem(IxDyn(&[m]), 1.0));
    let one_minus = tape.sub(ones, giou);
    let giou_term = tape.sum_all(one_minus);

    (l1, giou_term)
}

/// Generalized IoU of row-aligned center-size boxes, as a `[m]` vector.
fn generalized_iou_vector(tape: &mut Tape, a: Var, b: Var, _m: usize) -> Var {
    let corners = |tape: &mut Tape, x: Var| {
        let cx = tape.column(x, 0);
        let cy = tape.column(x, 1);
        let w = tape.column(x, 2);
        let h = tape.column(x, 3);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        let x1 = tape.sub(cx, hw);
        let x2 = tape.add(cx, hw);
        let y1 = tape.sub(cy, hh);
        let y2 = tape.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = corners(tape, a);
    let (bx1, by1, bx2, by2, bw, bh) = corners(tape, b);

    let ix1 = tape.max_elem(ax1, bx1);
    let iy1 = tape.max_elem(ay1, by1);
    let ix2 = tape.min_elem(ax2, bx2);
    let iy2 = tape.min_elem(ay2, by2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area_a = tape.mul(aw, ah);
    let area_b = tape.mul(bw, bh);
    let sum_areas = tape.add(area_a, area_b);
    let union = tape.sub(sum_areas, inter);
    let iou = tape.div(inter, union);

    let ex1 = tape.min_elem(ax1, bx1);
    let ey1 = tape.min_elem(ay1, by1);
    let ex2 = tape.max_elem(ax2, bx2);
    let ey2 = tape.max_elem(ay2, by2);
    let ew = tape.sub(ex2, ex1);
    let eh = tape.sub(ey2, ey1);
    let enc = tape.mul(ew, eh);
    let slack = tape.sub(enc, union);
    let penalty = tape.div(slack, enc);
    tape.sub(iou, penalty)
}

/// Sum of squared Mahalanobis distances of the selected embedding rows,
/// with the statistics held constant. Unnormalized.
pub fn objectness_term(
    tape: &mut Tape,
    embeddings: Var,
    indices: &[usize],
    om: &ObjectnessModel,
) -> Result<Var> {
    let d2 = mahalanobis_squared_rows(tape, embeddings, indices, om)?;
    match d2 {
        None => Ok(tape.scalar_constant(0.0)),
        Some(rows) => Ok(tape.sum_all(rows)),
    }
}

/// Soft-weighted variant: `sum_i w_i * d_M(q_i)^2` with detached weights.
pub fn weighted_objectness_term(
    tape: &mut Tape,
    embeddings: Var,
    indices: &[usize],
    om: &ObjectnessModel,
    weights: &[f64],
) -> Result<Var> {
    assert_eq!(indices.len(), weights.len());
    let d2 = mahalanobis_squared_rows(tape, embeddings, indices, om)?;
    match d2 {
        None => Ok(tape.scalar_constant(0.0)),
        Some(rows) => {
            let w = tape.constant(
                Tensor::from_shape_vec(IxDyn(&[weights.len()]), weights.to_vec()).unwrap(),
            );
            let weighted = tape.mul(rows, w);
            Ok(tape.sum_all(weighted))
        }
    }
}

fn mahalanobis_squared_rows(
    tape: &mut Tape,
    embeddings: Var,
    indices: &[usize],
    om: &ObjectnessModel,
) -> Result<Option<Var>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let precision = om.precision()?;
    let gathered = tape.gather_rows(embeddings, indices);
    let mut mu = Array2::<f64>::zeros((indices.len(), om.dim()));
    for mut row in mu.rows_mut() {
        row.assign(&om.mean);
    }
    let mu = tape.constant(mu.into_dyn());
    let a = tape.constant(precision.into_dyn());
    let diff = tape.sub(gathered, mu);
    let proj = tape.matmul(diff, a);
    let prod = tape.mul(proj, diff);
    Ok(Some(tape.sum_rows(prod)))
}

/// Soft-weighted L1 between pseudo-matched predicted boxes and their pseudo
/// boxes, in center-size coordinates. Unnormalized.
pub fn weighted_box_l1_term(
    tape: &mut Tape,
    boxes: Var,
    pairs: &[(usize, usize)],
    pseudo_boxes: &[BBox],
    weights: &[f64],
) -> Result<Var> {
    assert_eq!(pairs.len(), weights.len());
    if pairs.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    for &(_, j) in pairs {
        if j >= pseudo_boxes.len() {
            return Err(Error::PairingMismatch { index: j });
        }
    }
    let pred_idx: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let m = pairs.len();
    let pred = tape.gather_rows(boxes, &pred_idx);
    let mut target = Array2::<f64>::zeros((m, 4));
    for (r, &(_, j)) in pairs.iter().enumerate() {
        let b = &pseudo_boxes[j];
        target[[r, 0]] = b.cx;
        target[[r, 1]] = b.cy;
        target[[r, 2]] = b.w;
        target[[r, 3]] = b.h;
    }
    let target = tape.constant(target.into_dyn());
    let diff = tape.sub(pred, target);
    let absdiff = tape.abs(diff);
    let per_row = tape.sum_rows(absdiff);
    let w = tape.constant(Tensor::from_shape_vec(IxDyn(&[m]), weights.to_vec()).unwrap());
    let weighted = tape.mul(per_row, w);
    Ok(tape.sum_all(weighted))
}

/// Detached confidence weight of each selected embedding row.
pub fn soft_weights_for(
    embeddings: &Array2<f64>,
    indices: &[usize],
    om: &ObjectnessModel,
) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let d2 = om.mahalanobis_squared(&embeddings.row(i))?;
            Ok(crate::asf::soft_weight(d2, om.temperature))
        })
        .collect()
}
