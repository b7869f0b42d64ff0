//! Boundary emission: prominence-filtered peaks of adjacent-frame
//! dissimilarity (phonemes) and of next-segment dissimilarity (words).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{Level, Waveform};
use crate::boundary::{adjacent_dissim, segment_on};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Reference};
use crate::model::{
    context_on, encode_frames_on, encode_segments_on, waveform_input, ScpcModel, FRAME_SECONDS, RECEPTIVE_FIELD,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPickConfig {
    pub prominence: f64,
    pub level: Level,
    /// Min-max normalize word scores per utterance before peak picking.
    pub normalize_word_scores: bool,
}

impl PeakPickConfig {
    pub fn new(level: Level, prominence: f64) -> Self {
        Self { prominence, level, normalize_word_scores: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBoundaries {
    pub id: String,
    pub level: Level,
    pub times: Vec<f64>,
}

/// Topographic prominence of each entry of `peaks` in `x`.
pub fn peak_prominences(x: &[f64], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&i| {
            let h = x[i];
            let mut left = h;
            for &v in x[..i].iter().rev() {
                if v > h {
                    break;
                }
                left = left.min(v);
            }
            let mut right = h;
            for &v in &x[i + 1..] {
                if v > h {
                    break;
                }
                right = right.min(v);
            }
            h - left.max(right)
        })
        .collect()
}

/// Strict local maxima of `x` with prominence at least `min_prominence`.
/// With `pad_edges` the sequence is bordered by zeros so its first and last
/// entries can also be peaks.
pub fn find_peaks(x: &[f64], min_prominence: f64, pad_edges: bool) -> Vec<usize> {
    let padded: Vec<f64>;
    let (xs, shift) = if pad_edges {
        padded = std::iter::once(0.0).chain(x.iter().copied()).chain(std::iter::once(0.0)).collect();
        (&padded[..], 1)
    } else {
        (x, 0)
    };
    if xs.len() < 3 {
        return Vec::new();
    }
    let cands: Vec<usize> = (1..xs.len() - 1).filter(|&i| xs[i] > xs[i - 1] && xs[i] > xs[i + 1]).collect();
    let prom = peak_prominences(xs, &cands);
    cands.into_iter().zip(prom).filter(|&(_, p)| p >= min_prominence).map(|(i, _)| i - shift).collect()
}

/// Per-utterance score sequence with the time attached to each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrack {
    pub id: String,
    pub level: Level,
    pub scores: Vec<f64>,
    pub times: Vec<f64>,
}

impl ScoreTrack {
    fn empty(id: &str, level: Level) -> Self {
        Self { id: id.to_string(), level, scores: Vec::new(), times: Vec::new() }
    }

    pub fn pick(&self, prominence: f64) -> PredictedBoundaries {
        let pad = self.level == Level::Word;
        let times = find_peaks(&self.scores, prominence, pad).into_iter().map(|i| self.times[i]).collect();
        PredictedBoundaries { id: self.id.clone(), level: self.level, times }
    }
}

fn too_short(wave: &Waveform) -> bool {
    if wave.samples.len() < RECEPTIVE_FIELD {
        log::warn!("{}: {} samples is shorter than one frame; no boundaries emitted", wave.id, wave.samples.len());
        return true;
    }
    false
}

/// Normalized adjacent-frame dissimilarity; entry `j` sits at `(j + 1) * 10 ms`.
pub fn phoneme_track(model: &ScpcModel, wave: &Waveform) -> Result<ScoreTrack> {
    if too_short(wave) {
        return Ok(ScoreTrack::empty(&wave.id, Level::Phoneme));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = waveform_input(&mut tape, wave)?;
    let z = encode_frames_on(&mut tape, &params, x)?;
    if tape.value(z).rows() < 2 {
        return Ok(ScoreTrack::empty(&wave.id, Level::Phoneme));
    }
    let d = adjacent_dissim(&mut tape, z)?.d;
    let scores = tape.value(d).data().to_vec();
    let times = (0..scores.len()).map(|j| (j + 1) as f64 * FRAME_SECONDS).collect();
    Ok(ScoreTrack { id: wave.id.clone(), level: Level::Phoneme, scores, times })
}

/// `w_t = 1 - sim(c_t, s_{t+1})` over the segmentation at `thres`; entry
/// `t` sits at the end of segment `t`. Empty when there are fewer than
/// three segments.
pub fn word_track(model: &ScpcModel, wave: &Waveform, thres: f64, normalize: bool) -> Result<ScoreTrack> {
    if too_short(wave) {
        return Ok(ScoreTrack::empty(&wave.id, Level::Word));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = waveform_input(&mut tape, wave)?;
    let z = encode_frames_on(&mut tape, &params, x)?;
    if tape.value(z).rows() < 2 {
        return Ok(ScoreTrack::empty(&wave.id, Level::Word));
    }
    let seg = segment_on(&mut tape, z, thres)?;
    let m = seg.weights.n_segments();
    if m < 3 {
        return Ok(ScoreTrack::empty(&wave.id, Level::Word));
    }
    let s = encode_segments_on(&mut tape, &params, seg.means)?;
    let c = context_on(&mut tape, &params, s)?;
    let c_head = tape.narrow(c, 0, m - 1)?;
    let s_tail = tape.narrow(s, 1, m - 1)?;
    let sim = tape.cosine_sim(c_head, s_tail)?;
    let mut scores: Vec<f64> = tape.value(sim).data().iter().map(|v| 1.0 - v).collect();
    if normalize {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        scores.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    }
    let times = seg.weights.spans[..m - 1].iter().map(|&(_, end)| (end + 1) as f64 * FRAME_SECONDS).collect();
    Ok(ScoreTrack { id: wave.id.clone(), level: Level::Word, scores, times })
}

pub fn phoneme_boundaries(model: &ScpcModel, wave: &Waveform, cfg: &PeakPickConfig) -> Result<PredictedBoundaries> {
    Ok(phoneme_track(model, wave)?.pick(cfg.prominence))
}

pub fn word_boundaries(model: &ScpcModel, wave: &Waveform, thres: f64, cfg: &PeakPickConfig) -> Result<PredictedBoundaries> {
    Ok(word_track(model, wave, thres, cfg.normalize_word_scores)?.pick(cfg.prominence))
}

/// Score tracks for many utterances, computed in parallel.
pub fn score_tracks(
    model: &ScpcModel,
    waves: &[Waveform],
    level: Level,
    thres: f64,
    normalize_word_scores: bool,
) -> Result<Vec<ScoreTrack>> {
    waves
        .par_iter()
        .map(|w| match level {
            Level::Phoneme => phoneme_track(model, w),
            Level::Word => word_track(model, w, thres, normalize_word_scores),
        })
        .collect()
}

pub fn pick_all(tracks: &[ScoreTrack], prominence: f64) -> BTreeMap<String, Vec<f64>> {
    tracks.iter().map(|t| (t.id.clone(), t.pick(prominence).times)).collect()
}

/// `0.00, 0.01, ..., 0.50`.
pub fn prominence_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub prominence: f64,
    pub report: EvalReport,
}

/// Grid search for the prominence with the highest R-value; ties go to the
/// larger prominence.
pub fn tune_prominence(tracks: &[ScoreTrack], refs: &[Reference], grid: &[f64], tol: f64) -> Result<TuneResult> {
    if tracks.is_empty() || refs.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    if grid.is_empty() {
        return Err(Error::Invalid("empty prominence grid".into()));
    }
    let mut best: Option<TuneResult> = None;
    for &prominence in grid {
        let report = evaluate(&pick_all(tracks, prominence), refs, tol, false)?;
        let better = match &best {
            None => true,
            Some(b) => report.r_value > b.report.r_value || (report.r_value == b.report.r_value && prominence > b.prominence),
        };
        if better {
            best = Some(TuneResult { prominence, report });
        }
    }
    Ok(best.expect("nonempty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_peak() {
        assert_eq!(find_peaks(&[0.0, 1.0, 0.0], 0.5, false), vec![1]);
        let t = ScoreTrack { id: "u".into(), level: Level::Phoneme, scores: vec![0.0, 1.0, 0.0], times: vec![0.01, 0.02, 0.03] };
        assert_eq!(t.pick(0.5).times, vec![0.02]);
        assert!(t.pick(1.01).times.is_empty());
    }

    #[test]
    fn monotone_has_no_peaks() {
        assert!(find_peaks(&[0.0, 0.1, 0.2, 0.5, 0.9], 0.0, false).is_empty());
        assert_eq!(find_peaks(&[0.0, 0.1, 0.2, 0.5, 0.9], 0.0, true), vec![4]);
    }

    #[test]
    fn zero_prominence_keeps_every_strict_max() {
        let x = [0.0, 0.3, 0.2, 0.25, 0.25, 0.1, 0.9, 0.0];
        assert_eq!(find_peaks(&x, 0.0, false), vec![1, 6]);
    }

    #[test]
    fn prominence_uses_higher_valley() {
        let x = [0.0, 1.0, 0.4, 0.6, 0.2, 2.0, 0.0];
        let p = peak_prominences(&x, &[1, 3, 5]);
        assert!(p.iter().zip([0.8, 0.2, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(find_peaks(&x, 0.3, false), vec![1, 5]);
    }

    #[test]
    fn tune_prefers_larger_on_ties() {
        let tracks = vec![ScoreTrack {
            id: "u".into(),
            level: Level::Phoneme,
            scores: vec![0.0, 1.0, 0.0, 0.05, 0.0],
            times: vec![0.01, 0.02, 0.03, 0.04, 0.05],
        }];
        let refs = vec![Reference { id: "u".into(), times: vec![0.02], duration: 1.0 }];
        let r = tune_prominence(&tracks, &refs, &prominence_grid(), 0.005).unwrap();
        assert_eq!(r.prominence, 0.5);
        assert_eq!(r.report.r_value, 1.0);
        let single = tune_prominence(&tracks, &refs, &[0.0], 0.005).unwrap();
        assert_eq!(single.prominence, 0.0);
        assert!(tune_prominence(&[], &refs, &[0.0], 0.02).is_err());
    }
}
