//! Cutting long recordings into shorter utterances at silences.

use super::{AudioError, BoundaryAnnotation, Waveform};

/// Window used for the energy profile.
const WINDOW_SECONDS: f64 = 0.010;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// Recordings up to this length are kept whole.
    pub max_seconds: f64,
    /// Windows with RMS below this are silent.
    pub silence_threshold: f64,
    /// Shortest silent stretch that may host a cut.
    pub min_silence_seconds: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { max_seconds: 10.0, silence_threshold: 0.01, min_silence_seconds: 0.05 }
    }
}

/// Sample ranges `[start, end)` covering the whole waveform, each at most
/// `max_seconds` long. Cuts go to the middle of the longest eligible silence
/// in each stretch; a stretch without one is cut hard at the limit.
pub fn split_points(wave: &Waveform, cfg: &SplitConfig) -> Result<Vec<(usize, usize)>, AudioError> {
    if !(cfg.max_seconds > 0.0) || !(cfg.silence_threshold >= 0.0) || !(cfg.min_silence_seconds >= 0.0) {
        return Err(AudioError::InvalidSpec(format!("split settings {cfg:?}")));
    }
    let sr = wave.sample_rate as f64;
    let n = wave.samples.len();
    let limit = ((cfg.max_seconds * sr) as usize).max(1);
    if n <= limit {
        return Ok(vec![(0, n)]);
    }
    let win = ((WINDOW_SECONDS * sr) as usize).max(1);
    let silent: Vec<bool> = wave
        .samples
        .chunks(win)
        .map(|c| {
            let e: f64 = c.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / c.len() as f64;
            e.sqrt() < cfg.silence_threshold
        })
        .collect();
    let min_run = ((cfg.min_silence_seconds * sr) as usize).div_ceil(win).max(1);

    let mut spans = Vec::new();
    let mut start = 0;
    while n - start > limit {
        let hi = start + limit;
        let mut best: Option<(usize, usize)> = None;
        let mut w = start.div_ceil(win);
        while w * win < hi {
            if !silent[w] {
                w += 1;
                continue;
            }
            let first = w;
            while w < silent.len() && silent[w] && (w + 1) * win <= hi {
                w += 1;
            }
            let len = w - first;
            if len >= min_run && best.map_or(true, |b| len > b.1) {
                best = Some((first, len));
            }
            if w < silent.len() && silent[w] {
                w += 1;
            }
        }
        let cut = match best {
            Some((first, len)) => ((first * win + (first + len) * win) / 2).clamp(start + 1, hi),
            None => hi,
        };
        spans.push((start, cut));
        start = cut;
    }
    spans.push((start, n));
    Ok(spans)
}

/// Splits `wave` and its annotations. Pieces are named `<id>_<k>`; boundary
/// times are shifted to each piece and times on a cut are dropped.
pub fn split_utterance(
    wave: &Waveform,
    annotations: &[BoundaryAnnotation],
    cfg: &SplitConfig,
) -> Result<Vec<(Waveform, Vec<BoundaryAnnotation>)>, AudioError> {
    let spans = split_points(wave, cfg)?;
    if spans.len() == 1 {
        return Ok(vec![(wave.clone(), annotations.to_vec())]);
    }
    let sr = wave.sample_rate as f64;
    spans
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let id = format!("{}_{k}", wave.id);
            let piece = Waveform::new(id.clone(), wave.samples[a..b].to_vec(), wave.sample_rate)?;
            let (t0, t1) = (a as f64 / sr, b as f64 / sr);
            let anns = annotations
                .iter()
                .map(|ann| BoundaryAnnotation {
                    id: id.clone(),
                    level: ann.level,
                    times: ann.times.iter().filter(|&&t| t > t0 && t < t1).map(|t| t - t0).collect(),
                })
                .collect();
            Ok((piece, anns))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Level;

    fn tone(n: usize) -> Vec<f32> {
        (0..n).map(|i| 0.5 * (i as f32 * 0.3).sin()).collect()
    }

    #[test]
    fn short_recording_is_untouched() {
        let w = Waveform::new("a", tone(16_000), 16_000).unwrap();
        assert_eq!(split_points(&w, &SplitConfig::default()).unwrap(), vec![(0, 16_000)]);
    }

    #[test]
    fn cuts_inside_silence() {
        // 1.5 s tone, 0.2 s silence, 1.5 s tone
        let mut s = tone(24_000);
        s.extend(vec![0.0; 3_200]);
        s.extend(tone(24_000));
        let w = Waveform::new("a", s, 16_000).unwrap();
        let cfg = SplitConfig { max_seconds: 2.0, ..Default::default() };
        let spans = split_points(&w, &cfg).unwrap();
        assert_eq!(spans, vec![(0, 25_600), (25_600, 51_200)]);

        let phn = BoundaryAnnotation { id: "a".into(), level: Level::Phoneme, times: vec![0.5, 1.5, 1.7, 2.0] };
        let parts = split_utterance(&w, &[phn], &cfg).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].0.id, "a_1");
        assert_eq!(parts[0].1[0].times, vec![0.5, 1.5]);
        let shifted: Vec<f64> = parts[1].1[0].times.iter().map(|t| (t * 1e6).round() / 1e6).collect();
        assert_eq!(shifted, vec![0.1, 0.4]);
    }

    #[test]
    fn hard_cut_without_silence() {
        let w = Waveform::new("a", tone(50_000), 16_000).unwrap();
        let cfg = SplitConfig { max_seconds: 1.0, ..Default::default() };
        let spans = split_points(&w, &cfg).unwrap();
        assert_eq!(spans, vec![(0, 16_000), (16_000, 32_000), (32_000, 48_000), (48_000, 50_000)]);
    }

    #[test]
    fn rejects_bad_settings() {
        let w = Waveform::new("a", tone(100), 16_000).unwrap();
        assert!(split_points(&w, &SplitConfig { max_seconds: 0.0, ..Default::default() }).is_err());
    }
}
