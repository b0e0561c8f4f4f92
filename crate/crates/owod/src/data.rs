//! Dataset and auxiliary-box file formats, loading, and visibility.
//!
//! The dataset file carries an images array (each with its renderable scene
//! parameters), an annotations array with normalized center-size boxes, and
//! a categories array, all under an explicit schema version. The auxiliary
//! file holds one record per image with externally proposed boxes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use owod_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::asf::AuxiliaryBox;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::protocol::{label_visibility, Phase, TaskSchedule, VisibleAnnotation};
use crate::synth::{render_scene, SceneSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub image_id: u64,
    pub class_id: u32,
    /// `[cx, cy, w, h]`, normalized.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub categories: Vec<Category>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
}

/// One image with its full (unfiltered) annotations; the unit stored in the
/// exemplar store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: ImageEntry,
    pub annotations: Vec<Annotation>,
}

/// A record after visibility filtering and rendering, ready for the model.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image_id: u64,
    pub tensor: Tensor,
    pub annotations: Vec<VisibleAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxBoxEntry {
    /// `[cx, cy, w, h]`, normalized.
    pub bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxRecord {
    pub image_id: u64,
    pub boxes: Vec<AuxBoxEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxFile {
    pub schema_version: u32,
    pub records: Vec<AuxRecord>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_box(raw: &[f64; 4], image_id: u64) -> Result<BBox> {
    let bbox = BBox::new(raw[0], raw[1], raw[2], raw[3]);
    if !bbox.is_valid() {
        return Err(Error::Parse(format!(
            "image {image_id}: invalid box [{}, {}, {}, {}]",
            raw[0], raw[1], raw[2], raw[3]
        )));
    }
    Ok(bbox)
}

/// Parse the dataset file into per-image records, validating schema version,
/// box validity, and image references. Order follows the images array.
pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file: DatasetFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported schema version {}",
            path.display(),
            file.schema_version
        )));
    }
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    let known_ids: BTreeMap<u64, ()> = file.images.iter().map(|i| (i.id, ())).collect();
    for ann in &file.annotations {
        if !known_ids.contains_key(&ann.image_id) {
            return Err(Error::MissingImage {
                image_id: ann.image_id,
            });
        }
        check_box(&ann.bbox, ann.image_id)?;
        by_image.entry(ann.image_id).or_default().push(ann.clone());
    }
    Ok(file
        .images
        .into_iter()
        .map(|image| {
            let annotations = by_image.remove(&image.id).unwrap_or_default();
            DatasetRecord { image, annotations }
        })
        .collect())
}

/// Render a record and filter its annotations for the given task and phase.
pub fn realize_record(
    record: &DatasetRecord,
    schedule: &TaskSchedule,
    task: usize,
    phase: Phase,
) -> Result<LoadedImage> {
    let pairs: Vec<(u32, BBox)> = record
        .annotations
        .iter()
        .map(|a| Ok((a.class_id, check_box(&a.bbox, a.image_id)?)))
        .collect::<Result<_>>()?;
    let annotations = label_visibility(&pairs, schedule, task, phase)?;
    let tensor = render_scene(&record.image.scene, record.image.width, record.image.height);
    Ok(LoadedImage {
        image_id: record.image.id,
        tensor,
        annotations,
    })
}

/// Load, filter, and render a dataset for one task and phase.
pub fn load_dataset(
    path: &Path,
    schedule: &TaskSchedule,
    task: usize,
    phase: Phase,
) -> Result<Vec<LoadedImage>> {
    load_records(path)?
        .iter()
        .map(|r| realize_record(r, schedule, task, phase))
        .collect()
}

/// Load the auxiliary-box file into per-image candidate lists.
pub fn load_aux(path: &Path) -> Result<BTreeMap<u64, Vec<AuxiliaryBox>>> {
    let file: AuxFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported schema version {}",
            path.display(),
            file.schema_version
        )));
    }
    let mut map = BTreeMap::new();
    for record in file.records {
        let mut boxes = Vec::with_capacity(record.boxes.len());
        for entry in &record.boxes {
            let bbox = check_box(&entry.bbox, record.image_id)?;
            boxes.push(AuxiliaryBox {
                bbox,
                predicted_iou: entry.predicted_iou,
                stability: entry.stability,
            });
        }
        map.insert(record.image_id, boxes);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{TaskSpec, VisibleClass};
    use crate::synth::{generate, AuxNoiseSpec, ClassDef, ShapeKind, SynthSpec};
    use tempfile::tempdir;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            seed: 3,
            num_images: 4,
            image_size: 16,
            known_classes: vec![ClassDef {
                id: 0,
                name: "square".into(),
                shape: ShapeKind::Square,
                color: [0.9, 0.1, 0.1],
            }],
            distractor_classes: vec![ClassDef {
                id: 1,
                name: "ring".into(),
                shape: ShapeKind::Ring,
                color: [0.1, 0.9, 0.9],
            }],
            known_per_image: [1, 2],
            distractors_per_image: [1, 1],
            size_range: [0.15, 0.25],
            background: 0.1,
            noise_sigma: 0.0,
            aux: AuxNoiseSpec {
                jitter: 0.0,
                extra_per_image: 0,
                fragment_ratio: 0.0,
                near_miss_ratio: 0.0,
            },
        }
    }

    fn schedule() -> TaskSchedule {
        TaskSchedule {
            tasks: vec![
                TaskSpec { classes: vec![0] },
                TaskSpec { classes: vec![1] },
            ],
            exemplar_budget: 50,
        }
    }

    #[test]
    fn roundtrip_and_visibility() {
        let dir = tempdir().unwrap();
        let (dataset, aux) = generate(&small_spec()).unwrap();
        let data_path = dir.path().join("data.json");
        let aux_path = dir.path().join("aux.json");
        write_json(&data_path, &dataset).unwrap();
        write_json(&aux_path, &aux).unwrap();

        let schedule = schedule();
        let train = load_dataset(&data_path, &schedule, 0, Phase::Train).unwrap();
        for image in &train {
            assert!(image
                .annotations
                .iter()
                .all(|a| matches!(a.class, VisibleClass::Known(0))));
        }
        let eval = load_dataset(&data_path, &schedule, 0, Phase::Eval).unwrap();
        let unknowns: usize = eval
            .iter()
            .flat_map(|i| &i.annotations)
            .filter(|a| matches!(a.class, VisibleClass::Unknown))
            .count();
        assert!(unknowns > 0, "distractors must surface as unknown at eval");

        let aux_map = load_aux(&aux_path).unwrap();
        assert_eq!(aux_map.len(), 4);
    }

    #[test]
    fn empty_annotation_list_is_fine() {
        let dir = tempdir().unwrap();
        let (mut dataset, _) = generate(&small_spec()).unwrap();
        dataset.annotations.clear();
        let path = dir.path().join("data.json");
        write_json(&path, &dataset).unwrap();
        let loaded = load_dataset(&path, &schedule(), 0, Phase::Train).unwrap();
        assert_eq!(loaded.len(), 4);
        assert!(loaded.iter().all(|i| i.annotations.is_empty()));
    }

    #[test]
    fn malformed_box_names_the_image() {
        let dir = tempdir().unwrap();
        let (mut dataset, _) = generate(&small_spec()).unwrap();
        dataset.annotations[0].bbox = [0.5, 0.5, -0.1, 0.2];
        let offender = dataset.annotations[0].image_id;
        let path = dir.path().join("data.json");
        write_json(&path, &dataset).unwrap();
        match load_dataset(&path, &schedule(), 0, Phase::Train) {
            Err(Error::Parse(msg)) => assert!(msg.contains(&format!("image {offender}"))),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn dangling_image_reference_is_reported() {
        let dir = tempdir().unwrap();
        let (mut dataset, _) = generate(&small_spec()).unwrap();
        dataset.annotations[0].image_id = 999;
        let path = dir.path().join("data.json");
        write_json(&path, &dataset).unwrap();
        assert!(matches!(
            load_dataset(&path, &schedule(), 0, Phase::Train),
            Err(Error::MissingImage { image_id: 999 })
        ));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempdir().unwrap();
        let (mut dataset, _) = generate(&small_spec()).unwrap();
        dataset.schema_version = 99;
        let path = dir.path().join("data.json");
        write_json(&path, &dataset).unwrap();
        assert!(matches!(
            load_dataset(&path, &schedule(), 0, Phase::Train),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn unscheduled_class_id_is_an_error() {
        let dir = tempdir().unwrap();
        let (mut dataset, _) = generate(&small_spec()).unwrap();
        dataset.annotations[0].class_id = 42;
        let path = dir.path().join("data.json");
        write_json(&path, &dataset).unwrap();
        assert!(matches!(
            load_dataset(&path, &schedule(), 0, Phase::Train),
            Err(Error::UnknownClassId { class_id: 42 })
        ));
    }
}
