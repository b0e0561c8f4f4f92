use thiserror::Error;

/// All failure modes surfaced by the library and CLI.
///
/// Each variant has a stable category token (see [`Error::category`]) that
/// the CLI prints exactly once on exit, so callers can match on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("class id {class_id} not present in any task")]
    UnknownClassId { class_id: u32 },
    #[error("image {image_id} referenced but not present in the dataset")]
    MissingImage { image_id: u64 },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("schedule exhausted: no task after index {last_task}")]
    ScheduleExhausted { last_task: usize },
    #[error("mask has no set bits")]
    EmptyMask,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("pseudo-matched index {index} has no paired pseudo box")]
    PairingMismatch { index: usize },
    #[error("degenerate precision: no detections to evaluate")]
    DegeneratePrecision,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::UnknownClassId { .. } => "UnknownClassId",
            Error::MissingImage { .. } => "MissingImage",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::ScheduleExhausted { .. } => "ScheduleExhausted",
            Error::EmptyMask => "EmptyMask",
            Error::NumericalFailure(_) => "NumericalFailure",
            Error::PairingMismatch { .. } => "PairingMismatch",
            Error::DegeneratePrecision => "DegeneratePrecision",
            Error::Io { .. } => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
