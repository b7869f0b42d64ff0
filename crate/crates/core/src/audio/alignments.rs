use std::io::Write;
use std::path::Path;

use super::{AudioError, BoundaryAnnotation, Level};

/// Text formats accepted by [`parse_alignments`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentFormat {
    /// TIMIT `.phn`: `start_sample end_sample label` per line.
    TimitPhn,
    /// TIMIT `.wrd`: same layout as `.phn`, word labels.
    TimitWrd,
    /// One boundary time in seconds per line.
    SimpleTimes(Level),
}

impl AlignmentFormat {
    pub fn level(&self) -> Level {
        match self {
            AlignmentFormat::TimitPhn => Level::Phoneme,
            AlignmentFormat::TimitWrd => Level::Word,
            AlignmentFormat::SimpleTimes(l) => *l,
        }
    }
}

const SAME_TIME: f64 = 1e-9;

pub fn parse_alignments(
    path: impl AsRef<Path>,
    format: AlignmentFormat,
    sample_rate: u32,
) -> Result<BoundaryAnnotation, AudioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_alignments_str(&text, &id, format, sample_rate).map_err(|e| match e {
        AudioError::Parse { line, msg, .. } => AudioError::Parse { path: path.to_path_buf(), line, msg },
        AudioError::NonMonotone { line, msg, .. } => AudioError::NonMonotone { path: path.to_path_buf(), line, msg },
        other => other,
    })
}

/// Parses alignment text. For span formats the boundary set is every
/// segment end time plus the start of any segment that follows a gap;
/// coincident times are collapsed.
pub fn parse_alignments_str(
    text: &str,
    id: &str,
    format: AlignmentFormat,
    sample_rate: u32,
) -> Result<BoundaryAnnotation, AudioError> {
    let perr = |line: usize, msg: String| AudioError::Parse { path: id.into(), line, msg };
    let mono = |line: usize, msg: String| AudioError::NonMonotone { path: id.into(), line, msg };
    let mut times: Vec<f64> = Vec::new();
    match format {
        AlignmentFormat::SimpleTimes(_) => {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                let t: f64 = line.parse().map_err(|_| perr(i + 1, format!("expected a time in seconds, got `{line}`")))?;
                if !t.is_finite() || t < 0.0 {
                    return Err(perr(i + 1, format!("invalid time {t}")));
                }
                if let Some(&prev) = times.last() {
                    if t < prev - SAME_TIME {
                        return Err(mono(i + 1, format!("{t} follows {prev}")));
                    }
                }
                times.push(t);
            }
        }
        AlignmentFormat::TimitPhn | AlignmentFormat::TimitWrd => {
            let sr = sample_rate as f64;
            let mut prev: Option<(u64, u64)> = None;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let mut num = |what: &str| -> Result<u64, AudioError> {
                    let tok = parts.next().ok_or_else(|| perr(i + 1, format!("missing {what}")))?;
                    tok.parse().map_err(|_| perr(i + 1, format!("bad {what} `{tok}`")))
                };
                let start = num("start sample")?;
                let end = num("end sample")?;
                if parts.next().is_none() {
                    return Err(perr(i + 1, "missing label".into()));
                }
                if end <= start {
                    return Err(mono(i + 1, format!("end {end} not after start {start}")));
                }
                if let Some((ps, pe)) = prev {
                    if start < ps || end < pe {
                        return Err(mono(i + 1, format!("span {start}-{end} precedes {ps}-{pe}")));
                    }
                    if start > pe {
                        times.push(start as f64 / sr);
                    }
                }
                times.push(end as f64 / sr);
                prev = Some((start, end));
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
    }
    times.dedup_by(|b, a| (*b - *a).abs() <= SAME_TIME);
    Ok(BoundaryAnnotation { id: id.to_string(), level: format.level(), times })
}

/// Writes boundary times one per line with six decimals.
pub fn write_simple_times(path: impl AsRef<Path>, times: &[f64]) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io = |source| AudioError::Io { path: path.to_path_buf(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for t in times {
        writeln!(f, "{t:.6}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timit_spans_to_end_times() {
        let a = parse_alignments_str("0 1600 a\n1600 4800 b\n", "u", AlignmentFormat::TimitPhn, 16000).unwrap();
        assert_eq!(a.times, vec![0.1, 0.3]);
        assert_eq!(a.level, Level::Phoneme);
    }

    #[test]
    fn gaps_contribute_their_start() {
        let a = parse_alignments_str("0 1600 w1\n3200 4800 w2\n", "u", AlignmentFormat::TimitWrd, 16000).unwrap();
        assert_eq!(a.times, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn empty_and_simple_times() {
        let a = parse_alignments_str("", "u", AlignmentFormat::TimitPhn, 16000).unwrap();
        assert!(a.times.is_empty());
        let a = parse_alignments_str("0.10\n0.30", "u", AlignmentFormat::SimpleTimes(Level::Word), 16000).unwrap();
        assert_eq!(a.times, vec![0.1, 0.3]);
        let a = parse_alignments_str("0.1\n0.1\n0.3\n", "u", AlignmentFormat::SimpleTimes(Level::Word), 16000).unwrap();
        assert_eq!(a.times, vec![0.1, 0.3]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_alignments_str("0 1600 a\nxx 2 b\n", "u", AlignmentFormat::TimitPhn, 16000).unwrap_err();
        assert!(matches!(e, AudioError::Parse { line: 2, .. }), "{e}");
        let e = parse_alignments_str("0 1600 a\n800 1200 b\n", "u", AlignmentFormat::TimitPhn, 16000).unwrap_err();
        assert!(matches!(e, AudioError::NonMonotone { line: 2, .. }), "{e}");
        let e = parse_alignments_str("0.3\n0.1\n", "u", AlignmentFormat::SimpleTimes(Level::Phoneme), 16000).unwrap_err();
        assert!(matches!(e, AudioError::NonMonotone { line: 2, .. }), "{e}");
    }

    #[test]
    fn simple_times_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_simple_times(&p, &[0.02, 0.125]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0.020000\n0.125000\n");
        let a = parse_alignments(&p, AlignmentFormat::SimpleTimes(Level::Phoneme), 16000).unwrap();
        assert_eq!(a.times, vec![0.02, 0.125]);
        assert_eq!(a.id, "x");
    }
}
