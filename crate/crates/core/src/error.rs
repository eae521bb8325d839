use std::path::PathBuf;

use chrono::{DateTime, Utc};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("NWP record is missing field `{0}`")]
    MissingField(String),

    #[error("unknown NWP field `{0}`")]
    UnknownField(String),

    #[error("record timestamp {record} is not the valid time {valid} rounded to the hour")]
    Alignment {
        record: DateTime<Utc>,
        valid: DateTime<Utc>,
    },

    #[error("time {time} outside [{start}, {end}]")]
    OutOfRange {
        time: DateTime<Utc>,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },

    #[error("descriptor normalized with `{found}` but `{expected}` is required")]
    NormalizerMismatch { expected: String, found: String },

    #[error("duplicate frame for {site} at {timestamp}")]
    DuplicateTimestamp {
        site: String,
        timestamp: DateTime<Utc>,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {component} at step {step}; batch: {manifest}")]
    NonFinite {
        step: u64,
        component: String,
        manifest: String,
    },

    #[error("no gapless run of length {required} at {cadence_minutes} min cadence (longest available: {longest})")]
    NoGaplessRun {
        required: usize,
        cadence_minutes: i64,
        longest: usize,
    },

    #[error("only {available} eligible pairs, {requested} requested")]
    InsufficientPairs { available: usize, requested: usize },

    #[error("judgment references unknown item `{0}`")]
    UnknownItem(String),

    #[error("incomplete checklist `{0}`: {1}")]
    IncompleteChecklist(String, String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Decode(#[from] image::ImageError),
}
