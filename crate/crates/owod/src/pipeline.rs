//! End-to-end drivers behind the CLI subcommands. Tests call these directly
//! so the command-line surface and the acceptance suite share one code path.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint;
use crate::config::{sub_seed, RunConfig};
use crate::data::{
    load_aux, load_dataset, load_records, realize_record, write_json, DatasetRecord, LoadedImage,
};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::matching::MatchWeights;
use crate::protocol::{select_exemplars, ExemplarStore, Phase, TaskSchedule};
use crate::synth::{generate, SynthSpec};
use crate::train::{
    dump_pseudo_labels, train, AuxMap, Detector, ObjectnessSettings, TrainLogRecord,
};

fn write_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(
            &serde_json::to_string(record)
                .map_err(|e| Error::Parse(format!("serialize log record: {e}")))?,
        );
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(out.as_bytes()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Generate a synthetic dataset and auxiliary-box file from a spec file.
pub fn cmd_synth(spec_path: &Path, out: &Path, aux_out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|source| Error::Io {
        path: spec_path.display().to_string(),
        source,
    })?;
    let spec: SynthSpec =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", spec_path.display())))?;
    let (dataset, aux) = generate(&spec)?;
    write_json(out, &dataset)?;
    write_json(aux_out, &aux)
}

fn collect_exemplars(
    records: &[DatasetRecord],
    classes: &[u32],
    schedule: &TaskSchedule,
    store: &mut ExemplarStore,
    seed: u64,
) {
    for &class_id in classes {
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(seed, &format!("exemplars:{class_id}")));
        let picked = select_exemplars(records, class_id, schedule.exemplar_budget, &mut rng);
        store.insert(class_id, picked, schedule.exemplar_budget);
    }
}

/// Train a fresh detector on one task's data and save a checkpoint.
pub fn cmd_train(
    config_path: &Path,
    data_path: &Path,
    aux_path: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
    task: usize,
) -> Result<MetricReport> {
    let config = RunConfig::load(config_path)?;
    train_from_config(&config, data_path, aux_path, out, log_path, task)
}

/// Same as [`cmd_train`] but with an already-loaded configuration;
/// the entry point for in-process experiment harnesses.
pub fn train_from_config(
    config: &RunConfig,
    data_path: &Path,
    aux_path: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
    task: usize,
) -> Result<MetricReport> {
    let schedule = config.task_schedule();
    schedule.validate()?;
    if task >= schedule.num_tasks() {
        return Err(Error::ScheduleExhausted {
            last_task: schedule.num_tasks() - 1,
        });
    }
    let head_classes = schedule.known_at(task);
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, "model-init"));
    let mut det = Detector::new(
        config.model.detector_config(head_classes.len()),
        config.objectness,
        head_classes,
        &mut rng,
    )?;

    let records = load_records(data_path)?;
    let images: Vec<LoadedImage> = records
        .iter()
        .map(|r| realize_record(r, &schedule, task, Phase::Train))
        .collect::<Result<_>>()?;
    let aux: Option<AuxMap> = match aux_path {
        Some(path) => Some(load_aux(path)?),
        None => None,
    };

    let mut data_rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, "data"));
    let log = train(
        &mut det,
        &images,
        aux.as_ref(),
        &config.train_options(),
        &config.loss,
        MatchWeights::default(),
        &config.asf_config(),
        &mut data_rng,
    )?;
    if let Some(path) = log_path {
        write_log(path, &log)?;
    }

    let mut store = ExemplarStore::default();
    collect_exemplars(
        &records,
        &schedule.known_at(task),
        &schedule,
        &mut store,
        config.seed,
    );
    checkpoint::save(out, &det, config, task, &store)?;

    let eval_images: Vec<LoadedImage> = records
        .iter()
        .map(|r| realize_record(r, &schedule, task, Phase::Eval))
        .collect::<Result<_>>()?;
    det.evaluate_dataset(
        &eval_images,
        &schedule.previously_known(task),
        &schedule.current(task),
        task,
        &config.eval,
    )
}

/// Evaluate a checkpoint on a dataset at the checkpoint's task position.
/// An override config replaces the evaluation section stored in the
/// checkpoint; detections can be dumped one record per line.
pub fn cmd_eval(
    ckpt_path: &Path,
    data_path: &Path,
    out: Option<&Path>,
    config_override: Option<&Path>,
    detections_out: Option<&Path>,
) -> Result<MetricReport> {
    let (det, mut config, task, _) = checkpoint::load(ckpt_path)?;
    if let Some(path) = config_override {
        config.eval = RunConfig::load(path)?.eval;
    }
    let schedule = config.task_schedule();
    let images = load_dataset(data_path, &schedule, task, Phase::Eval)?;
    let (detections, gt) = det.detect_dataset(&images, &config.eval)?;
    if let Some(path) = detections_out {
        write_json(path, &detections)?;
    }
    let report = crate::eval::evaluate(
        &detections,
        &gt,
        &schedule.previously_known(task),
        &schedule.current(task),
        task,
        &config.eval,
    );
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Dump the filtered pseudo labels a checkpointed model derives from an
/// auxiliary-box file.
pub fn cmd_pseudo_label(
    ckpt_path: &Path,
    data_path: &Path,
    aux_path: &Path,
    out: &Path,
) -> Result<()> {
    let (det, config, task, _) = checkpoint::load(ckpt_path)?;
    let schedule = config.task_schedule();
    let images = load_dataset(data_path, &schedule, task, Phase::Train)?;
    let aux = load_aux(aux_path)?;
    let dump = dump_pseudo_labels(
        &det,
        &images,
        &aux,
        &config.asf_config(),
        MatchWeights::default(),
    )?;
    write_json(out, &dump)
}

/// Advance a checkpoint to the next task: widen the class head (old
/// columns preserved), train on the new data, then fine-tune on the replay
/// store plus fresh exemplars at the reduced learning rate.
pub fn cmd_advance(
    ckpt_path: &Path,
    data_path: &Path,
    aux_path: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<MetricReport> {
    let (mut det, config, task, mut store) = checkpoint::load(ckpt_path)?;
    let schedule = config.task_schedule();
    let next = task + 1;
    if next >= schedule.num_tasks() {
        return Err(Error::ScheduleExhausted { last_task: task });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, &format!("widen:{next}")));
    det.widen_class_head(schedule.known_at(next), &mut rng);

    let records = load_records(data_path)?;
    let images: Vec<LoadedImage> = records
        .iter()
        .map(|r| realize_record(r, &schedule, next, Phase::Train))
        .collect::<Result<_>>()?;
    let aux: Option<AuxMap> = match aux_path {
        Some(path) => Some(load_aux(path)?),
        None => None,
    };

    let mut data_rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, &format!("data:{next}")));
    let mut log = train(
        &mut det,
        &images,
        aux.as_ref(),
        &config.train_options(),
        &config.loss,
        MatchWeights::default(),
        &config.asf_config(),
        &mut data_rng,
    )?;

    // replay fine-tuning on stored exemplars plus this task's exemplars
    collect_exemplars(&records, &schedule.current(next), &schedule, &mut store, config.seed);
    let replay: Vec<LoadedImage> = store
        .replay_records()
        .iter()
        .map(|r| realize_record(r, &schedule, next, Phase::Train))
        .collect::<Result<_>>()?;
    let mut replay_rng =
        ChaCha20Rng::seed_from_u64(sub_seed(config.seed, &format!("finetune:{next}")));
    let finetune_log = train(
        &mut det,
        &replay,
        aux.as_ref(),
        &config.finetune_options(),
        &config.loss,
        MatchWeights::default(),
        &config.asf_config(),
        &mut replay_rng,
    )?;
    let offset = log.len() as u64;
    log.extend(finetune_log.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));
    if let Some(path) = log_path {
        write_log(path, &log)?;
    }

    checkpoint::save(out, &det, &config, next, &store)?;

    let eval_images: Vec<LoadedImage> = records
        .iter()
        .map(|r| realize_record(r, &schedule, next, Phase::Eval))
        .collect::<Result<_>>()?;
    det.evaluate_dataset(
        &eval_images,
        &schedule.previously_known(next),
        &schedule.current(next),
        next,
        &config.eval,
    )
}
