//! In-memory utterances with their reference boundaries.

use rayon::prelude::*;

use crate::audio::{
    load_wav, parse_alignments, resample_linear, AlignmentFormat, Level, Manifest, SynthUtterance, Waveform,
};
use crate::error::{Error, Result};
use crate::metrics::Reference;
use crate::model::SAMPLE_RATE;

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub waves: Vec<Waveform>,
    pub phoneme: Vec<Reference>,
    pub word: Vec<Reference>,
}

impl Corpus {
    /// Loads every manifest entry. Audio at other rates is resampled to
    /// 16 kHz when `resample` is set and rejected otherwise.
    pub fn load(manifest: &Manifest, resample: bool) -> Result<Self> {
        let items: Vec<(Waveform, Reference, Reference)> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let mut wave = load_wav(&e.wav)?;
                let rate = wave.sample_rate;
                let duration = wave.duration();
                let phn = parse_alignments(&e.phn, AlignmentFormat::TimitPhn, rate)?;
                let wrd = parse_alignments(&e.wrd, AlignmentFormat::TimitWrd, rate)?;
                if rate != SAMPLE_RATE {
                    if !resample {
                        return Err(Error::SampleRate { id: wave.id, rate });
                    }
                    wave = resample_linear(&wave, SAMPLE_RATE);
                }
                let id = wave.id.clone();
                Ok((
                    wave,
                    Reference { id: id.clone(), times: phn.times, duration },
                    Reference { id, times: wrd.times, duration },
                ))
            })
            .collect::<Result<_>>()?;
        let mut c = Corpus::default();
        for (w, p, r) in items {
            c.waves.push(w);
            c.phoneme.push(p);
            c.word.push(r);
        }
        Ok(c)
    }

    pub fn from_synth(utts: &[SynthUtterance]) -> Self {
        let reference = |id: &str, times: &[f64], d: f64| Reference { id: id.to_string(), times: times.to_vec(), duration: d };
        Self {
            waves: utts.iter().map(|u| u.wave.clone()).collect(),
            phoneme: utts.iter().map(|u| reference(&u.wave.id, &u.phonemes.times, u.wave.duration())).collect(),
            word: utts.iter().map(|u| reference(&u.wave.id, &u.words.times, u.wave.duration())).collect(),
        }
    }

    pub fn references(&self, level: Level) -> &[Reference] {
        match level {
            Level::Phoneme => &self.phoneme,
            Level::Word => &self.word,
        }
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}
