use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use owod::pipeline;

#[derive(Parser)]
#[command(
    name = "owod",
    about = "Open-world object detector: synthetic data, training, pseudo labeling, incremental tasks, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and auxiliary-box file from a spec.
    Synth {
        /// Scene-spec TOML file.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Output auxiliary-box JSON path.
        #[arg(long)]
        aux_out: PathBuf,
    },
    /// Train a fresh detector on one task and write a checkpoint.
    Train {
        /// Run-config TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset JSON path.
        #[arg(long)]
        data: PathBuf,
        /// Auxiliary-box JSON path; omit to train without auxiliary
        /// supervision.
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training-log JSONL path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Task index to train at (0-based).
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Evaluate a checkpoint and write a metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric-report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run-config TOML whose [eval] section overrides the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write every kept detection to this JSON file.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Dump the filtered pseudo labels with their matching costs.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Advance a checkpoint to the next task (widen head, train, replay
    /// fine-tune) and write the new checkpoint.
    Advance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// New task's dataset JSON path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> owod::Result<()> {
    match cli.command {
        Command::Synth { spec, out, aux_out } => pipeline::cmd_synth(&spec, &out, &aux_out),
        Command::Train {
            config,
            data,
            aux,
            out,
            log,
            task,
        } => {
            let report =
                pipeline::cmd_train(&config, &data, aux.as_deref(), &out, log.as_deref(), task)?;
            println!("{}", summarize(&report));
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            detections,
        } => {
            let report = pipeline::cmd_eval(
                &checkpoint,
                &data,
                out.as_deref(),
                config.as_deref(),
                detections.as_deref(),
            )?;
            println!("{}", summarize(&report));
            Ok(())
        }
        Command::PseudoLabel {
            checkpoint,
            data,
            aux,
            out,
        } => pipeline::cmd_pseudo_label(&checkpoint, &data, &aux, &out),
        Command::Advance {
            checkpoint,
            data,
            aux,
            out,
            log,
        } => {
            let report =
                pipeline::cmd_advance(&checkpoint, &data, aux.as_deref(), &out, log.as_deref())?;
            println!("{}", summarize(&report));
            Ok(())
        }
    }
}

fn summarize(report: &owod::eval::MetricReport) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    };
    format!(
        "task {} | mAP prev {} curr {} both {} | u-recall {} | wi {} | a-ose {}",
        report.task,
        fmt(report.map_previously_known),
        fmt(report.map_currently_known),
        fmt(report.map_both),
        fmt(report.u_recall),
        fmt(report.wilderness_impact),
        report.a_ose
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
