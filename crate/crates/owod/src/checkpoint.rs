//! Checkpoint archive: parameters, objectness statistics, the full run
//! configuration, the task position, and the exemplar store, under a
//! format-version tag.

use std::path::Path;

use owod_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::write_json;
use crate::error::{Error, Result};
use crate::model::{ObjectnessModel, Params};
use crate::protocol::ExemplarStore;
use crate::train::Detector;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub run_config: RunConfig,
    pub head_classes: Vec<u32>,
    pub task_index: usize,
    pub params: Vec<NamedTensor>,
    pub objectness: ObjectnessModel,
    pub exemplars: ExemplarStore,
}

pub fn save(
    path: &Path,
    det: &Detector,
    run_config: &RunConfig,
    task_index: usize,
    exemplars: &ExemplarStore,
) -> Result<()> {
    let params = det
        .params
        .iter()
        .map(|(name, tensor)| NamedTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.iter().copied().collect(),
        })
        .collect();
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        run_config: run_config.clone(),
        head_classes: det.head_classes.clone(),
        task_index,
        params,
        objectness: det.om.clone(),
        exemplars: exemplars.clone(),
    };
    write_json(path, &checkpoint)
}

pub fn load(path: &Path) -> Result<(Detector, RunConfig, usize, ExemplarStore)> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if checkpoint.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            checkpoint.format_version
        )));
    }
    let entries = checkpoint
        .params
        .into_iter()
        .map(|nt| {
            let expected: usize = nt.shape.iter().product();
            if expected != nt.data.len() {
                return Err(Error::Parse(format!(
                    "parameter {}: shape {:?} does not hold {} values",
                    nt.name,
                    nt.shape,
                    nt.data.len()
                )));
            }
            let tensor = Tensor::from_shape_vec(ndarray::IxDyn(&nt.shape), nt.data)
                .map_err(|e| Error::Parse(format!("parameter {}: {e}", nt.name)))?;
            Ok((nt.name, tensor))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = checkpoint
        .run_config
        .model
        .detector_config(checkpoint.head_classes.len());
    config.validate()?;
    let det = Detector {
        config,
        params: Params::from_entries(entries),
        om: checkpoint.objectness,
        head_classes: checkpoint.head_classes,
    };
    Ok((
        det,
        checkpoint.run_config,
        checkpoint.task_index,
        checkpoint.exemplars,
    ))
}
