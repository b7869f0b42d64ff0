use std::path::PathBuf;

use thiserror::Error;

use crate::audio::AudioError;
use crate::diffcore::DiffError;
use crate::kv::KvError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("waveform `{id}` has {samples} samples; at least {needed} are required")]
    TooShort { id: String, samples: usize, needed: usize },
    #[error("waveform `{id}` is sampled at {rate} Hz; 16000 Hz is required (set resample = true to convert)")]
    SampleRate { id: String, rate: u32 },
    #[error("boundary threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss on utterance `{id}`")]
    NonFinite { id: String },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}{}", .last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    Diverged { epoch: usize, step: usize, detail: String, last_good: Option<PathBuf> },
    #[error("unsorted boundary times in `{0}`")]
    Unsorted(String),
    #[error("utterance ids differ between predictions and references: missing predictions for [{}], unknown predictions [{}]", .missing.join(", "), .extra.join(", "))]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
