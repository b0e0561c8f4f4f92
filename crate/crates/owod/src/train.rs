//! Training loop: batched forward passes, assignment, pseudo labeling,
//! loss assembly, the optimizer step, and the objectness-statistics update.

use std::collections::BTreeMap;

use ndarray::Array2;
use owod_grad::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::asf::{
    filter_pseudo_labels, remove_known_overlaps, score_candidates, AsfConfig, AuxiliaryBox,
    PseudoLabel,
};
use crate::data::LoadedImage;
use crate::error::{Error, Result};
use crate::eval::{detections_for_image, evaluate, Detection, EvalConfig, ImageGt, MetricReport};
use crate::geometry::BBox;
use crate::losses::{
    box_regression_terms, focal_classification_term, objectness_term, soft_weights_for,
    weighted_box_l1_term, weighted_objectness_term, LossReport, LossTerms, LossWeights,
};
use crate::matching::{match_known, match_pseudo, MatchResult, MatchWeights};
use crate::model::{
    collect_outputs, forward_image, stage_params, DetectorConfig, LayerOutputs, ObjectnessModel,
    Params,
};
use crate::optim::Adam;
use crate::protocol::{VisibleClass, VisibleAnnotation};

pub type AuxMap = BTreeMap<u64, Vec<AuxiliaryBox>>;

/// Model state shared by training, evaluation, and checkpointing.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: Params,
    pub om: ObjectnessModel,
    /// Class id served by each class-head column.
    pub head_classes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectnessSettings {
    pub momentum: f64,
    pub epsilon: f64,
    pub temperature: f64,
}

impl Default for ObjectnessSettings {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            epsilon: 1e-4,
            temperature: 1.3,
        }
    }
}

impl Detector {
    pub fn new(
        config: DetectorConfig,
        objectness: ObjectnessSettings,
        head_classes: Vec<u32>,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let mut config = config;
        config.num_known_classes = head_classes.len();
        config.validate()?;
        let params = Params::init(&config, rng);
        let om = ObjectnessModel::new(
            config.embed_dim,
            objectness.momentum,
            objectness.epsilon,
            objectness.temperature,
        );
        Ok(Self {
            config,
            params,
            om,
            head_classes,
        })
    }

    /// Inference-mode forward pass for one image.
    pub fn forward_collect(&self, image: &Tensor) -> Result<LayerOutputs> {
        let mut tape = Tape::new();
        let tp = stage_params(&mut tape, &self.params);
        let fwd = forward_image(&mut tape, &tp, &self.config, image)?;
        collect_outputs(&tape, &fwd, &self.config, &self.om)
    }

    /// Run inference over a dataset and pair detections with ground truth.
    pub fn detect_dataset(
        &self,
        data: &[LoadedImage],
        cfg: &EvalConfig,
    ) -> Result<(Vec<Detection>, Vec<ImageGt>)> {
        let mut detections = Vec::new();
        let mut gt = Vec::new();
        for image in data {
            let outputs = self.forward_collect(&image.tensor)?;
            detections.extend(detections_for_image(
                &outputs,
                image.image_id,
                &self.head_classes,
                cfg,
            ));
            gt.push(ImageGt {
                image_id: image.image_id,
                annotations: image.annotations.clone(),
            });
        }
        Ok((detections, gt))
    }

    /// Full evaluation of one task split.
    pub fn evaluate_dataset(
        &self,
        data: &[LoadedImage],
        previously_known: &[u32],
        currently_known: &[u32],
        task: usize,
        cfg: &EvalConfig,
    ) -> Result<MetricReport> {
        let (detections, gt) = self.detect_dataset(data, cfg)?;
        Ok(evaluate(
            &detections,
            &gt,
            previously_known,
            currently_known,
            task,
            cfg,
        ))
    }

    /// Widen the class head for newly introduced classes, preserving the
    /// existing columns bitwise. New columns follow the fresh-training
    /// initializer (Xavier weights, background-prior bias).
    pub fn widen_class_head(&mut self, new_head_classes: Vec<u32>, rng: &mut ChaCha20Rng) {
        let old = self.head_classes.len();
        let new = new_head_classes.len();
        assert!(new >= old, "class head cannot shrink");
        assert_eq!(
            self.head_classes,
            new_head_classes[..old],
            "existing class columns must keep their positions"
        );
        if new == old {
            self.head_classes = new_head_classes;
            return;
        }
        let d = self.config.embed_dim;
        let old_w = self.params.get("head.class.weight").clone();
        let old_b = self.params.get("head.class.bias").clone();
        let limit = (6.0 / (d + new) as f64).sqrt();
        let mut w = Array2::<f64>::zeros((d, new));
        for r in 0..d {
            for c in 0..old {
                w[[r, c]] = old_w[[r, c]];
            }
            for c in old..new {
                w[[r, c]] = rng.gen_range(-limit..limit);
            }
        }
        let prior = 0.01f64;
        let fresh_bias = -((1.0 - prior) / prior).ln();
        let mut b = ndarray::Array1::<f64>::from_elem(new, fresh_bias);
        for c in 0..old {
            b[c] = old_b[[c]];
        }
        self.params.set("head.class.weight", w.into_dyn());
        self.params.set("head.class.bias", b.into_dyn());
        self.config.num_known_classes = new;
        self.head_classes = new_head_classes;
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Keep only pseudo candidates above the matching-cost threshold.
    pub apply_threshold: bool,
    /// Scale auxiliary losses by `exp(-T d_M^2)` confidence weights.
    pub apply_soft_weights: bool,
    /// Fraction of the run after which the learning rate drops by 10x.
    pub lr_drop_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            apply_threshold: true,
            apply_soft_weights: true,
            lr_drop_fraction: 0.8,
            clip_grad_norm: 0.5,
        }
    }
}

/// One training-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

struct ImageStep<'a> {
    image: &'a LoadedImage,
    gt_boxes: Vec<BBox>,
    gt_classes: Vec<usize>,
}

fn known_targets(
    annotations: &[VisibleAnnotation],
    head_index: &BTreeMap<u32, usize>,
) -> Result<(Vec<BBox>, Vec<usize>)> {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for ann in annotations {
        match ann.class {
            VisibleClass::Known(id) => {
                let col = head_index.get(&id).ok_or(Error::ConfigMismatch(format!(
                    "class id {id} not served by the class head"
                )))?;
                boxes.push(ann.bbox);
                classes.push(*col);
            }
            VisibleClass::Unknown => {}
        }
    }
    Ok((boxes, classes))
}

/// Pseudo labels for one image given current predictions over the
/// unmatched set. Returns the labels and the pseudo assignment.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_label_image(
    candidates: &[AuxiliaryBox],
    known_gt: &[BBox],
    outputs: &LayerOutputs,
    unmatched: &[usize],
    asf_cfg: &AsfConfig,
    apply_threshold: bool,
) -> (Vec<PseudoLabel>, Vec<(usize, usize)>) {
    let survivors = remove_known_overlaps(candidates, known_gt, asf_cfg.known_overlap_cutoff);
    let unmatched_preds: Vec<(f64, BBox)> = unmatched
        .iter()
        .map(|&i| (outputs.objectness[i], outputs.boxes[i]))
        .collect();
    let mut labels: Vec<PseudoLabel> = if apply_threshold {
        filter_pseudo_labels(&survivors, &unmatched_preds, asf_cfg)
    } else {
        let mut scored = score_candidates(&survivors, &unmatched_preds, asf_cfg.alpha);
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .map(|(i, cost)| PseudoLabel {
                bbox: survivors[i].bbox,
                cost,
                matched_prediction: None,
            })
            .collect()
    };
    let pseudo_boxes: Vec<BBox> = labels.iter().map(|l| l.bbox).collect();
    let pairs = match_pseudo(
        unmatched,
        &outputs.objectness,
        &outputs.boxes,
        &pseudo_boxes,
        asf_cfg.alpha,
    );
    for &(pred, label) in &pairs {
        labels[label].matched_prediction = Some(pred);
    }
    (labels, pairs)
}

/// Train in place over the given images. Auxiliary supervision activates
/// only when `aux` is present. Returns one log record per step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    det: &mut Detector,
    data: &[LoadedImage],
    aux: Option<&AuxMap>,
    opts: &TrainOptions,
    loss_weights: &LossWeights,
    match_weights: MatchWeights,
    asf_cfg: &AsfConfig,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<TrainLogRecord>> {
    if data.is_empty() {
        return Err(Error::ConfigMismatch("training set is empty".into()));
    }
    let head_index: BTreeMap<u32, usize> = det
        .head_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut adam = Adam::new(&det.params, opts.learning_rate, opts.weight_decay);
    let mut log = Vec::with_capacity(opts.steps);
    let obj_layer = det.config.objectness_layer_index - 1;
    let num_layers = det.config.num_decoder_layers;

    let lr_drop_at = (opts.steps as f64 * opts.lr_drop_fraction).floor() as usize;
    for step in 0..opts.steps {
        if step == lr_drop_at && lr_drop_at < opts.steps {
            adam.lr = opts.learning_rate * 0.1;
        }
        let picks: Vec<usize> = (0..opts.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let steps: Vec<ImageStep> = picks
            .iter()
            .map(|&i| {
                let image = &data[i];
                let (gt_boxes, gt_classes) = known_targets(&image.annotations, &head_index)?;
                Ok(ImageStep {
                    image,
                    gt_boxes,
                    gt_classes,
                })
            })
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let tp = stage_params(&mut tape, &det.params);
        let mut terms = LossTerms::new();
        let mut matched_embeddings: Vec<Vec<f64>> = Vec::new();

        for item in &steps {
            let fwd = forward_image(&mut tape, &tp, &det.config, &item.image.tensor)?;
            let outputs = collect_outputs(&tape, &fwd, &det.config, &det.om)?;
            let gt: Vec<(BBox, usize)> = item
                .gt_boxes
                .iter()
                .zip(&item.gt_classes)
                .map(|(&b, &c)| (b, c))
                .collect();
            let result: MatchResult =
                match_known(&outputs.class_probs, &outputs.boxes, &gt, match_weights);

            for layer in 1..num_layers {
                let logits = fwd.class_logits[layer].expect("head on layer >= 2");
                let boxes = fwd.boxes[layer].expect("head on layer >= 2");
                terms.cls.push(focal_classification_term(
                    &mut tape,
                    logits,
                    &result.known,
                    &item.gt_classes,
                    det.config.num_queries,
                    det.config.num_known_classes,
                ));
                let (l1, giou) =
                    box_regression_terms(&mut tape, boxes, &result.known, &item.gt_boxes);
                terms.l1.push(l1);
                terms.giou.push(giou);
            }
            terms.num_gt += item.gt_boxes.len();

            let emb_var = fwd.layer_embeddings[obj_layer];
            let matched_preds: Vec<usize> = result.known.iter().map(|&(p, _)| p).collect();
            terms
                .obj
                .push(objectness_term(&mut tape, emb_var, &matched_preds, &det.om)?);
            for &p in &matched_preds {
                matched_embeddings.push(outputs.embeddings[obj_layer].row(p).to_vec());
            }

            if let Some(aux_map) = aux {
                if let Some(candidates) = aux_map.get(&item.image.image_id) {
                    let (labels, pairs) = pseudo_label_image(
                        candidates,
                        &item.gt_boxes,
                        &outputs,
                        &result.unmatched,
                        asf_cfg,
                        opts.apply_threshold,
                    );
                    if !pairs.is_empty() {
                        let pm_preds: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
                        let weights = if opts.apply_soft_weights {
                            soft_weights_for(&outputs.embeddings[obj_layer], &pm_preds, &det.om)?
                        } else {
                            vec![1.0; pairs.len()]
                        };
                        terms.obj_pse.push(weighted_objectness_term(
                            &mut tape, emb_var, &pm_preds, &det.om, &weights,
                        )?);
                        let boxes_final = fwd.boxes[num_layers - 1].expect("final layer head");
                        let pseudo_boxes: Vec<BBox> = labels.iter().map(|l| l.bbox).collect();
                        terms.reg_pse.push(weighted_box_l1_term(
                            &mut tape,
                            boxes_final,
                            &pairs,
                            &pseudo_boxes,
                            &weights,
                        )?);
                        terms.num_pseudo += pairs.len();
                    }
                }
            }
        }

        let (total, report) = terms.finish(&mut tape, loss_weights);
        tape.backward(total);
        let mut grads: Vec<Option<Tensor>> = det
            .params
            .iter()
            .map(|(name, _)| tape.grad(tp.var(name)).cloned())
            .collect();
        if opts.clip_grad_norm > 0.0 {
            let total_sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = total_sq.sqrt();
            if norm > opts.clip_grad_norm {
                let scale = opts.clip_grad_norm / norm;
                for g in grads.iter_mut().flatten() {
                    *g *= scale;
                }
            }
        }
        adam.step(&mut det.params, &grads);

        if !matched_embeddings.is_empty() {
            let rows = matched_embeddings.len();
            let dim = det.config.embed_dim;
            let flat: Vec<f64> = matched_embeddings.into_iter().flatten().collect();
            let batch = Array2::from_shape_vec((rows, dim), flat).expect("embedding batch");
            det.om.update(&batch);
        }

        log.push(TrainLogRecord {
            step: step as u64,
            report,
        });
    }
    Ok(log)
}

/// Pseudo-label dump entry for external inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoDumpRecord {
    pub image_id: u64,
    pub labels: Vec<PseudoLabel>,
}

/// Run the pseudo-labeling pipeline in inference mode over a dataset.
pub fn dump_pseudo_labels(
    det: &Detector,
    data: &[LoadedImage],
    aux: &AuxMap,
    asf_cfg: &AsfConfig,
    match_weights: MatchWeights,
) -> Result<Vec<PseudoDumpRecord>> {
    let head_index: BTreeMap<u32, usize> = det
        .head_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut out = Vec::new();
    for image in data {
        let outputs = det.forward_collect(&image.tensor)?;
        let (gt_boxes, gt_classes) = known_targets(&image.annotations, &head_index)?;
        let gt: Vec<(BBox, usize)> = gt_boxes
            .iter()
            .zip(&gt_classes)
            .map(|(&b, &c)| (b, c))
            .collect();
        let result = match_known(&outputs.class_probs, &outputs.boxes, &gt, match_weights);
        let labels = match aux.get(&image.image_id) {
            Some(candidates) => {
                pseudo_label_image(candidates, &gt_boxes, &outputs, &result.unmatched, asf_cfg, true)
                    .0
            }
            None => Vec::new(),
        };
        out.push(PseudoDumpRecord {
            image_id: image.image_id,
            labels,
        });
    }
    Ok(out)
}
