//! A miniature query-based detector.
//!
//! The decoder is a stack of layers, each applying self-attention over the
//! queries, cross-attention over a flattened single-scale feature grid from
//! a small convolutional backbone, and a feed-forward block. One configured
//! decoder layer hosts objectness (a Gaussian model over its query
//! embeddings; no regression loss is attached there), while every later
//! layer feeds the shared classification and box-regression heads.

mod linalg;
mod net;
mod objectness;

pub use linalg::{cholesky, spd_inverse};
pub use net::{forward_image, stage_params, ForwardOutputs, Params, TapeParams};
pub use objectness::ObjectnessModel;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_queries: usize,
    pub embed_dim: usize,
    pub num_decoder_layers: usize,
    /// 1-based decoder layer whose embeddings host the objectness model.
    pub objectness_layer_index: usize,
    pub num_known_classes: usize,
    pub ffn_dim: usize,
    /// Square input image side; must be divisible by 8 (three stride-2 convs).
    pub image_size: usize,
    /// Channel widths of the first two backbone convs; the third projects
    /// to `embed_dim`.
    pub backbone_channels: [usize; 2],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            embed_dim: 32,
            num_decoder_layers: 6,
            objectness_layer_index: 1,
            num_known_classes: 4,
            ffn_dim: 64,
            image_size: 48,
            backbone_channels: [16, 32],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::ConfigMismatch("num_queries must be positive".into()));
        }
        if self.objectness_layer_index == 0 || self.objectness_layer_index > self.num_decoder_layers
        {
            return Err(Error::ConfigMismatch(format!(
                "objectness_layer_index {} outside 1..={}",
                self.objectness_layer_index, self.num_decoder_layers
            )));
        }
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(Error::ConfigMismatch(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Number of feature-grid positions after the backbone.
    pub fn num_positions(&self) -> usize {
        let side = self.image_size / 8;
        side * side
    }
}

/// Per-image outputs read off the tape, ready for matching and evaluation.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    /// Per decoder layer, `[num_queries, embed_dim]`.
    pub embeddings: Vec<Array2<f64>>,
    /// Objectness likelihood of each query, from the configured layer.
    pub objectness: Vec<f64>,
    /// Final-layer class logits `[num_queries, num_known_classes]`.
    pub class_logits: Array2<f64>,
    /// Sigmoid of the final-layer logits.
    pub class_probs: Array2<f64>,
    /// Final-layer boxes.
    pub boxes: Vec<BBox>,
}

/// Assemble plain-array outputs from a forward pass.
pub fn collect_outputs(
    tape: &owod_grad::Tape,
    fwd: &ForwardOutputs,
    config: &DetectorConfig,
    om: &ObjectnessModel,
) -> Result<LayerOutputs> {
    let embeddings: Vec<Array2<f64>> = fwd
        .layer_embeddings
        .iter()
        .map(|&v| to2(tape.value(v)))
        .collect();
    let obj_emb = &embeddings[config.objectness_layer_index - 1];
    let mut objectness = Vec::with_capacity(config.num_queries);
    for row in obj_emb.rows() {
        objectness.push(om.likelihood(&row)?);
    }
    let last = fwd
        .class_logits
        .last()
        .and_then(|v| *v)
        .ok_or_else(|| Error::ConfigMismatch("model has no classification layer".into()))?;
    let class_logits = to2(tape.value(last));
    let class_probs = class_logits.mapv(|z| 1.0 / (1.0 + (-z).exp()));
    let boxes_var = fwd
        .boxes
        .last()
        .and_then(|v| *v)
        .ok_or_else(|| Error::ConfigMismatch("model has no regression layer".into()))?;
    let raw = to2(tape.value(boxes_var));
    let boxes = raw
        .rows()
        .into_iter()
        .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
        .collect();
    Ok(LayerOutputs {
        embeddings,
        objectness,
        class_logits,
        class_probs,
        boxes,
    })
}

fn to2(t: &owod_grad::Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}

/// Geometric-mean score fusion `P_obj^gamma * P_cls^(1-gamma)`.
///
/// `gamma = 0` returns the classification score unchanged, `gamma = 1` the
/// objectness; `gamma = 0.5` recovers the symmetric product form.
pub fn combine_scores(p_obj: f64, p_cls: f64, gamma: f64) -> f64 {
    p_obj.powf(gamma) * p_cls.powf(1.0 - gamma)
}
