//! Run configuration: one TOML file carrying every hyperparameter, with
//! one master seed fanned out into named sub-streams.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asf::AsfConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossWeights;
use crate::model::DetectorConfig;
use crate::protocol::{TaskSchedule, TaskSpec};
use crate::train::{ObjectnessSettings, TrainOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub num_queries: usize,
    pub embed_dim: usize,
    pub num_decoder_layers: usize,
    pub objectness_layer_index: usize,
    pub ffn_dim: usize,
    pub image_size: usize,
    pub backbone_channels: [usize; 2],
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            num_queries: d.num_queries,
            embed_dim: d.embed_dim,
            num_decoder_layers: d.num_decoder_layers,
            objectness_layer_index: d.objectness_layer_index,
            ffn_dim: d.ffn_dim,
            image_size: d.image_size,
            backbone_channels: d.backbone_channels,
        }
    }
}

impl ModelSection {
    pub fn detector_config(&self, num_known_classes: usize) -> DetectorConfig {
        DetectorConfig {
            num_queries: self.num_queries,
            embed_dim: self.embed_dim,
            num_decoder_layers: self.num_decoder_layers,
            objectness_layer_index: self.objectness_layer_index,
            num_known_classes,
            ffn_dim: self.ffn_dim,
            image_size: self.image_size,
            backbone_channels: self.backbone_channels,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AsfSection {
    pub alpha: f64,
    pub threshold: f64,
    pub known_overlap_cutoff: f64,
    pub apply_threshold: bool,
    pub apply_soft_weights: bool,
}

impl Default for AsfSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            threshold: 0.7,
            known_overlap_cutoff: 0.5,
            apply_threshold: true,
            apply_soft_weights: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub finetune_steps: usize,
    /// Fine-tuning runs at `learning_rate * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
    /// Fraction of the run after which the learning rate drops by 10x.
    pub lr_drop_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            finetune_steps: 150,
            finetune_lr_scale: 0.1,
            lr_drop_fraction: 0.8,
            clip_grad_norm: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub exemplar_budget: usize,
    pub tasks: Vec<TaskSpec>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            exemplar_budget: 50,
            tasks: vec![
                TaskSpec {
                    classes: vec![0, 1, 2, 3],
                },
                TaskSpec {
                    classes: vec![4, 5, 6, 7],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub objectness: ObjectnessSettings,
    pub asf: AsfSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub schedule: ScheduleSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        config.task_schedule().validate()?;
        Ok(config)
    }

    pub fn task_schedule(&self) -> TaskSchedule {
        TaskSchedule {
            tasks: self.schedule.tasks.clone(),
            exemplar_budget: self.schedule.exemplar_budget,
        }
    }

    pub fn asf_config(&self) -> AsfConfig {
        AsfConfig {
            alpha: self.asf.alpha,
            threshold: self.asf.threshold,
            known_overlap_cutoff: self.asf.known_overlap_cutoff,
            temperature: self.objectness.temperature,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            apply_threshold: self.asf.apply_threshold,
            apply_soft_weights: self.asf.apply_soft_weights,
            lr_drop_fraction: self.train.lr_drop_fraction,
            clip_grad_norm: self.train.clip_grad_norm,
        }
    }

    pub fn finetune_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.train.finetune_steps,
            learning_rate: self.train.learning_rate * self.train.finetune_lr_scale,
            ..self.train_options()
        }
    }
}

/// Named deterministic sub-stream of the master seed (FNV-1a over the tag).
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
