//! Incremental-task bookkeeping: class-set schedules, label visibility,
//! and the exemplar store used for replay fine-tuning.
//!
//! Classes are introduced task by task; at task `t` the known set is the
//! union of all classes introduced so far, classes of later tasks are the
//! unknowns. Training sees only known labels, evaluation relabels the rest
//! as unknown.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<TaskSpec>,
    pub exemplar_budget: usize,
}

impl TaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::ConfigMismatch("schedule has no tasks".into()));
        }
        let mut seen = BTreeMap::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                if let Some(prev) = seen.insert(c, t) {
                    return Err(Error::ConfigMismatch(format!(
                        "class {c} appears in tasks {prev} and {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Sorted known classes at task `t` (0-based).
    pub fn known_at(&self, task: usize) -> Vec<u32> {
        let mut classes: Vec<u32> = self.tasks[..=task]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        classes.sort_unstable();
        classes
    }

    /// Sorted classes known before task `t` began.
    pub fn previously_known(&self, task: usize) -> Vec<u32> {
        let mut classes: Vec<u32> = self.tasks[..task]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        classes.sort_unstable();
        classes
    }

    pub fn current(&self, task: usize) -> Vec<u32> {
        let mut classes = self.tasks[task].classes.clone();
        classes.sort_unstable();
        classes
    }

    /// The task introducing `class_id`, if any.
    pub fn task_of(&self, class_id: u32) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.classes.contains(&class_id))
    }

    /// Map from class id to class-head column at task `t`.
    pub fn head_index(&self, task: usize) -> BTreeMap<u32, usize> {
        self.known_at(task)
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibleClass {
    Known(u32),
    Unknown,
}

#[derive(Debug, Clone, Copy)]
pub struct VisibleAnnotation {
    pub class: VisibleClass,
    pub bbox: BBox,
}

/// Apply task visibility: training drops labels outside the known set,
/// evaluation relabels them as unknown. A class in no task is an error.
pub fn label_visibility(
    annotations: &[(u32, BBox)],
    schedule: &TaskSchedule,
    task: usize,
    phase: Phase,
) -> Result<Vec<VisibleAnnotation>> {
    let known = schedule.known_at(task);
    let mut out = Vec::with_capacity(annotations.len());
    for &(class_id, bbox) in annotations {
        if schedule.task_of(class_id).is_none() {
            return Err(Error::UnknownClassId { class_id });
        }
        if known.binary_search(&class_id).is_ok() {
            out.push(VisibleAnnotation {
                class: VisibleClass::Known(class_id),
                bbox,
            });
        } else if phase == Phase::Eval {
            out.push(VisibleAnnotation {
                class: VisibleClass::Unknown,
                bbox,
            });
        }
    }
    Ok(out)
}

/// Per-class replay exemplars, capped at the schedule's budget.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub per_class: BTreeMap<u32, Vec<DatasetRecord>>,
}

impl ExemplarStore {
    pub fn total(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }

    pub fn max_per_class(&self) -> usize {
        self.per_class.values().map(|v| v.len()).max().unwrap_or(0)
    }

    pub fn insert(&mut self, class_id: u32, records: Vec<DatasetRecord>, budget: usize) {
        let mut records = records;
        records.truncate(budget);
        self.per_class.insert(class_id, records);
    }

    /// All stored records, deduplicated by image id, in image-id order.
    pub fn replay_records(&self) -> Vec<DatasetRecord> {
        let mut by_id: BTreeMap<u64, DatasetRecord> = BTreeMap::new();
        for records in self.per_class.values() {
            for r in records {
                by_id.entry(r.image.id).or_insert_with(|| r.clone());
            }
        }
        by_id.into_values().collect()
    }
}

/// Up to `budget` images containing the class, chosen uniformly without
/// replacement; deterministic for a fixed RNG state. Selection order is
/// normalized to image-id order.
pub fn select_exemplars(
    records: &[DatasetRecord],
    class_id: u32,
    budget: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<DatasetRecord> {
    assert!(budget > 0, "exemplar budget must be positive");
    let mut eligible: Vec<&DatasetRecord> = records
        .iter()
        .filter(|r| r.annotations.iter().any(|a| a.class_id == class_id))
        .collect();
    if eligible.len() > budget {
        eligible.shuffle(rng);
        eligible.truncate(budget);
    }
    eligible.sort_by_key(|r| r.image.id);
    eligible.into_iter().cloned().collect()
}
