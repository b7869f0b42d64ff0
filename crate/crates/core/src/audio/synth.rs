use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_wav, AudioError, BoundaryAnnotation, Level, Manifest, ManifestEntry, SampleFormat, Waveform};
use crate::kv::{KvError, KvMap};
use crate::rng::mix_seed;

/// Stationary spectral template of one phone: a sum of sines.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneTemplate {
    pub freqs: Vec<f64>,
    pub amps: Vec<f64>,
}

/// Recipe for a synthetic speech-like corpus with exact alignments.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub phones: Vec<PhoneTemplate>,
    /// Words as phone-index sequences.
    pub lexicon: Vec<Vec<usize>>,
    pub phone_ms: (f64, f64),
    pub words_per_utt: (usize, usize),
    pub silence_prob: f64,
    pub silence_ms: (f64, f64),
    /// Peak amplitude of the uniform background noise.
    pub noise_floor: f64,
    pub crossfade_ms: f64,
    pub seed: u64,
}

/// Knobs read from a spec file; templates and lexicon are drawn from `seed`.
const SPEC_KEYS: &[&str] = &[
    "seed",
    "sample_rate",
    "n_phones",
    "n_words",
    "word_len_min",
    "word_len_max",
    "phone_ms_min",
    "phone_ms_max",
    "words_min",
    "words_max",
    "silence_prob",
    "silence_ms_min",
    "silence_ms_max",
    "noise_floor",
];

impl Default for SynthSpec {
    fn default() -> Self {
        Self::generated(5, 8, (2, 4), 7)
    }
}

impl SynthSpec {
    /// Random phone templates and lexicon drawn from `seed`.
    ///
    /// Words have no two identical adjacent phones and are pairwise distinct.
    pub fn generated(n_phones: usize, n_words: usize, word_len: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5917]));
        let (lo, hi) = (200.0f64.ln(), 3600.0f64.ln());
        let phones = (0..n_phones)
            .map(|_| {
                let k = rng.gen_range(2..=3);
                let freqs: Vec<f64> = (0..k).map(|_| rng.gen_range(lo..hi).exp().round()).collect();
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.0)).collect();
                let total: f64 = raw.iter().sum();
                PhoneTemplate { freqs, amps: raw.iter().map(|a| 0.6 * a / total).collect() }
            })
            .collect();
        let mut lexicon: Vec<Vec<usize>> = Vec::new();
        let mut attempts = 0;
        while lexicon.len() < n_words && n_phones > 0 && attempts < 10_000 {
            attempts += 1;
            let len = rng.gen_range(word_len.0..=word_len.1.max(word_len.0));
            let mut w: Vec<usize> = Vec::with_capacity(len);
            while w.len() < len {
                let p = rng.gen_range(0..n_phones);
                if w.last() != Some(&p) || n_phones == 1 {
                    w.push(p);
                }
            }
            if !lexicon.contains(&w) {
                lexicon.push(w);
            }
        }
        Self {
            sample_rate: 16_000,
            phones,
            lexicon,
            phone_ms: (60.0, 140.0),
            words_per_utt: (2, 5),
            silence_prob: 0.25,
            silence_ms: (60.0, 160.0),
            noise_floor: 0.003,
            crossfade_ms: 5.0,
            seed,
        }
    }

    pub fn from_kv(text: &str) -> Result<Self, KvError> {
        let kv = KvMap::parse(text)?;
        kv.reject_unknown(SPEC_KEYS)?;
        let base = Self::default();
        let (mut seed, mut n_phones, mut n_words) = (base.seed, base.phones.len(), base.lexicon.len());
        let (mut wl_min, mut wl_max) = (2usize, 4usize);
        kv.read("seed", &mut seed)?;
        kv.read("n_phones", &mut n_phones)?;
        kv.read("n_words", &mut n_words)?;
        kv.read("word_len_min", &mut wl_min)?;
        kv.read("word_len_max", &mut wl_max)?;
        let mut s = Self::generated(n_phones, n_words, (wl_min, wl_max), seed);
        kv.read("sample_rate", &mut s.sample_rate)?;
        kv.read("phone_ms_min", &mut s.phone_ms.0)?;
        kv.read("phone_ms_max", &mut s.phone_ms.1)?;
        kv.read("words_min", &mut s.words_per_utt.0)?;
        kv.read("words_max", &mut s.words_per_utt.1)?;
        kv.read("silence_prob", &mut s.silence_prob)?;
        kv.read("silence_ms_min", &mut s.silence_ms.0)?;
        kv.read("silence_ms_max", &mut s.silence_ms.1)?;
        kv.read("noise_floor", &mut s.noise_floor)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::InvalidSpec(m));
        if self.lexicon.is_empty() {
            return bad("empty lexicon".into());
        }
        if self.phones.is_empty() {
            return bad("empty phone inventory".into());
        }
        if let Some(w) = self.lexicon.iter().find(|w| w.is_empty() || w.iter().any(|&p| p >= self.phones.len())) {
            return bad(format!("word {w:?} references unknown phones or is empty"));
        }
        if self.phone_ms.0 < 60.0 || self.phone_ms.1 < self.phone_ms.0 {
            return bad(format!("phone duration range {:?} ms must start at >= 60 ms", self.phone_ms));
        }
        if self.silence_prob > 0.0 && (self.silence_ms.0 < 60.0 || self.silence_ms.1 < self.silence_ms.0) {
            return bad(format!("silence duration range {:?} ms must start at >= 60 ms", self.silence_ms));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad(format!("silence probability {} outside [0, 1]", self.silence_prob));
        }
        if self.words_per_utt.0 == 0 || self.words_per_utt.1 < self.words_per_utt.0 {
            return bad(format!("words per utterance range {:?}", self.words_per_utt));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, p) in self.phones.iter().enumerate() {
            if p.freqs.len() != p.amps.len() {
                return bad(format!("phone {i}: {} freqs but {} amps", p.freqs.len(), p.amps.len()));
            }
            if let Some(f) = p.freqs.iter().find(|&&f| f <= 0.0 || f >= nyquist) {
                return bad(format!("phone {i}: frequency {f} Hz not below Nyquist {nyquist} Hz"));
            }
        }
        Ok(())
    }

    /// Renders the knobs understood by [`SynthSpec::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "n_phones = {}", self.phones.len());
        let _ = writeln!(s, "n_words = {}", self.lexicon.len());
        let _ = writeln!(s, "phone_ms_min = {}\nphone_ms_max = {}", self.phone_ms.0, self.phone_ms.1);
        let _ = writeln!(s, "words_min = {}\nwords_max = {}", self.words_per_utt.0, self.words_per_utt.1);
        let _ = writeln!(s, "silence_prob = {}", self.silence_prob);
        let _ = writeln!(s, "silence_ms_min = {}\nsilence_ms_max = {}", self.silence_ms.0, self.silence_ms.1);
        let _ = writeln!(s, "noise_floor = {}", self.noise_floor);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Phone(usize),
    Silence,
}

/// Span in samples, end exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub wave: Waveform,
    pub phone_spans: Vec<Span>,
    pub word_spans: Vec<Span>,
    /// Internal phone/silence joins.
    pub phonemes: BoundaryAnnotation,
    /// Internal word edges.
    pub words: BoundaryAnnotation,
}

fn ms_to_samples(ms: f64, sr: u32) -> usize {
    (ms * sr as f64 / 1000.0).round() as usize
}

/// Generates utterance `index`; fully determined by `(spec.seed, index)`.
pub fn synth_utterance(spec: &SynthSpec, index: usize) -> Result<SynthUtterance, AudioError> {
    spec.validate()?;
    let sr = spec.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[0xA11, index as u64]));
    let n_words = rng.gen_range(spec.words_per_utt.0..=spec.words_per_utt.1);

    let mut units: Vec<(Unit, usize)> = Vec::new();
    let mut word_spans = Vec::new();
    let mut cursor = 0usize;
    for wi in 0..n_words {
        if wi > 0 && rng.gen_bool(spec.silence_prob) {
            let len = ms_to_samples(rng.gen_range(spec.silence_ms.0..=spec.silence_ms.1), sr);
            units.push((Unit::Silence, len));
            cursor += len;
        }
        let prev = units.last().and_then(|u| match u.0 {
            Unit::Phone(p) => Some(p),
            Unit::Silence => None,
        });
        // Adjacent identical phones would leave no audible join.
        let choices: Vec<usize> =
            (0..spec.lexicon.len()).filter(|&w| prev.map_or(true, |p| spec.lexicon[w][0] != p)).collect();
        let word = if choices.is_empty() { rng.gen_range(0..spec.lexicon.len()) } else { choices[rng.gen_range(0..choices.len())] };
        let start = cursor;
        for &p in &spec.lexicon[word] {
            let len = ms_to_samples(rng.gen_range(spec.phone_ms.0..=spec.phone_ms.1), sr);
            units.push((Unit::Phone(p), len));
            cursor += len;
        }
        word_spans.push(Span { start, end: cursor, label: format!("w{word}") });
    }

    let total = cursor;
    let half = ms_to_samples(spec.crossfade_ms / 2.0, sr) as f64;
    let mut samples = vec![0.0f64; total];
    let mut phone_spans = Vec::with_capacity(units.len());
    let mut start = 0usize;
    let n_units = units.len();
    for (ui, &(unit, len)) in units.iter().enumerate() {
        let end = start + len;
        let label = match unit {
            Unit::Phone(p) => format!("p{p}"),
            Unit::Silence => "sil".to_string(),
        };
        phone_spans.push(Span { start, end, label });
        if let Unit::Phone(p) = unit {
            let tpl = &spec.phones[p];
            let phases: Vec<f64> = tpl.freqs.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let lo = if ui == 0 { 0 } else { (start as f64 - half).max(0.0) as usize };
            let hi = if ui + 1 == n_units { total } else { ((end as f64 + half) as usize).min(total) };
            for (n, out) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                let x = n as f64 + 0.5;
                let w_in = if ui == 0 || half == 0.0 { 1.0 } else { ((x - (start as f64 - half)) / (2.0 * half)).clamp(0.0, 1.0) };
                let w_out =
                    if ui + 1 == n_units || half == 0.0 { 1.0 } else { (((end as f64 + half) - x) / (2.0 * half)).clamp(0.0, 1.0) };
                let w = w_in * w_out;
                if w == 0.0 {
                    continue;
                }
                let t = n as f64 / sr as f64;
                let v: f64 = tpl
                    .freqs
                    .iter()
                    .zip(&tpl.amps)
                    .zip(&phases)
                    .map(|((f, a), ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                    .sum();
                *out += w * v;
            }
        }
        start = end;
    }
    for s in samples.iter_mut() {
        *s += rng.gen_range(-spec.noise_floor..=spec.noise_floor);
    }
    let samples: Vec<f32> = samples.into_iter().map(|s| s.clamp(-1.0, 1.0) as f32).collect();

    let id = format!("utt{index:05}");
    let secs = |s: usize| s as f64 / sr as f64;
    let phon_times = phone_spans.iter().skip(1).map(|s| secs(s.start)).collect();
    let mut word_times = Vec::new();
    for (i, w) in word_spans.iter().enumerate() {
        if i > 0 && word_spans[i - 1].end != w.start {
            word_times.push(secs(w.start));
        }
        if i + 1 < word_spans.len() {
            word_times.push(secs(w.end));
        }
    }
    Ok(SynthUtterance {
        wave: Waveform::new(id.clone(), samples, sr)?,
        phone_spans,
        word_spans,
        phonemes: BoundaryAnnotation { id: id.clone(), level: Level::Phoneme, times: phon_times },
        words: BoundaryAnnotation { id, level: Level::Word, times: word_times },
    })
}

/// Generates utterances `0..n_utts`.
pub fn synth_corpus(spec: &SynthSpec, n_utts: usize) -> Result<Vec<SynthUtterance>, AudioError> {
    spec.validate()?;
    use rayon::prelude::*;
    (0..n_utts).into_par_iter().map(|i| synth_utterance(spec, i)).collect()
}

fn write_spans(path: &Path, spans: &[Span]) -> Result<(), AudioError> {
    let mut s = String::new();
    for sp in spans {
        let _ = writeln!(s, "{} {} {}", sp.start, sp.end, sp.label);
    }
    std::fs::write(path, s).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })
}

/// Writes PCM16 WAVs with TIMIT-style `.phn`/`.wrd` files into `dir` and
/// returns the manifest (not yet saved).
pub fn write_corpus(utts: &[SynthUtterance], dir: &Path) -> Result<Manifest, AudioError> {
    std::fs::create_dir_all(dir).map_err(|source| AudioError::Io { path: dir.to_path_buf(), source })?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let id = &u.wave.id;
        let e = ManifestEntry {
            wav: dir.join(format!("{id}.wav")),
            phn: dir.join(format!("{id}.phn")),
            wrd: dir.join(format!("{id}.wrd")),
        };
        write_wav(&e.wav, &u.wave, SampleFormat::Pcm16)?;
        write_spans(&e.phn, &u.phone_spans)?;
        write_spans(&e.wrd, &u.word_spans)?;
        entries.push(e);
    }
    Ok(Manifest { entries })
}
