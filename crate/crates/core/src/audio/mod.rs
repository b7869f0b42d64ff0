//! Waveform ingestion, alignment parsing and the synthetic corpus.

mod alignments;
mod manifest;
mod split;
mod synth;
mod wav;

pub use alignments::{parse_alignments, parse_alignments_str, write_simple_times, AlignmentFormat};
pub use manifest::{Manifest, ManifestEntry};
pub use split::{split_points, split_utterance, SplitConfig};
pub use synth::{synth_corpus, synth_utterance, write_corpus, PhoneTemplate, SynthSpec, SynthUtterance};
pub use wav::{load_wav, resample_linear, wav_duration, write_wav, SampleFormat};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("{path}: expected mono audio, found {channels} channels")]
    MultiChannel { path: PathBuf, channels: u16 },
    #[error("{path}: unsupported codec ({detail}); expected PCM16 or float32")]
    UnsupportedCodec { path: PathBuf, detail: String },
    #[error("{path}: truncated file: {msg}")]
    Truncated { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: non-monotone span: {msg}")]
    NonMonotone { path: PathBuf, line: usize, msg: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("empty waveform")]
    Empty,
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        Ok(Self { id: id.into(), samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scales so that the peak magnitude is at most 1.
    pub fn normalize(&mut self) {
        let peak = self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            self.samples.iter_mut().for_each(|s| *s /= peak);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Phoneme,
    Word,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Phoneme => "phoneme",
            Level::Word => "word",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phoneme" | "phone" => Ok(Level::Phoneme),
            "word" => Ok(Level::Word),
            other => Err(format!("unknown level `{other}` (expected phoneme or word)")),
        }
    }
}

/// Reference boundary times (seconds, strictly increasing) for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryAnnotation {
    pub id: String,
    pub level: Level,
    pub times: Vec<f64>,
}
