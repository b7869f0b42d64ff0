//! Boundary matching and segmentation scores: precision, recall, F1,
//! over-segmentation and R-value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{parse_alignments, wav_duration, AlignmentFormat, Level, Manifest};
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 0.020;

/// Slack added to the tolerance so that a 20 ms offset computed from
/// decimal seconds still counts as a hit.
const TOL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub n_ref: usize,
    pub n_pred: usize,
    pub n_hit: usize,
    pub tolerance: f64,
}

fn check_sorted(times: &[f64], what: &str) -> Result<()> {
    if times.windows(2).any(|w| !(w[0] <= w[1])) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Unsorted(what.to_string()));
    }
    Ok(())
}

/// Greedy in-order one-to-one matching within `tol` seconds.
pub fn match_boundaries(pred: &[f64], reference: &[f64], tol: f64) -> Result<MatchResult> {
    check_sorted(pred, "predictions")?;
    check_sorted(reference, "references")?;
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < pred.len() && j < reference.len() {
        let delta = pred[i] - reference[j];
        if delta.abs() <= tol + TOL_SLACK {
            hits += 1;
            i += 1;
            j += 1;
        } else if delta < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(MatchResult { n_ref: reference.len(), n_pred: pred.len(), n_hit: hits, tolerance: tol })
}

/// R-value from hit rate `hr` and over-segmentation `os` (both fractions).
pub fn r_value(hr: f64, os: f64) -> f64 {
    let r1 = ((1.0 - hr).powi(2) + os.powi(2)).sqrt();
    let r2 = (-os + hr - 1.0) / 2f64.sqrt();
    1.0 - (r1.abs() + r2.abs()) / 2.0
}

/// Scores as fractions. `os` is `None` when precision is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_ref: usize,
    pub n_pred: usize,
    pub n_hit: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub os: Option<f64>,
    pub r_value: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl EvalReport {
    pub fn from_counts(n_hit: usize, n_pred: usize, n_ref: usize) -> Self {
        let precision = if n_pred > 0 { n_hit as f64 / n_pred as f64 } else { 0.0 };
        let recall = if n_ref > 0 { n_hit as f64 / n_ref as f64 } else { 0.0 };
        let os = (precision > 0.0).then(|| recall / precision - 1.0);
        // R/P - 1 equals n_pred/n_ref - 1, which stays defined without hits.
        let os_r = os.unwrap_or(if n_ref > 0 { n_pred as f64 / n_ref as f64 - 1.0 } else { 0.0 });
        Self { n_ref, n_pred, n_hit, precision, recall, f1: f1(precision, recall), os, r_value: r_value(recall, os_r) }
    }

    pub fn from_match(m: &MatchResult) -> Self {
        Self::from_counts(m.n_hit, m.n_pred, m.n_ref)
    }

    /// Derived scores from a published (precision, recall) pair.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let os = (precision > 0.0).then(|| recall / precision - 1.0);
        Self {
            n_ref: 0,
            n_pred: 0,
            n_hit: 0,
            precision,
            recall,
            f1: f1(precision, recall),
            os,
            r_value: r_value(recall, os.unwrap_or(-1.0)),
        }
    }

    /// `key=value` pairs, percentages with one decimal.
    pub fn to_kv(&self) -> String {
        format!(
            "n_ref={}\nn_pred={}\nn_hit={}\nprecision={:.1}\nrecall={:.1}\nf1={:.1}\nos={}\nr_value={:.1}\n",
            self.n_ref,
            self.n_pred,
            self.n_hit,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            self.os.map(|o| format!("{:.1}", 100.0 * o)).unwrap_or_else(|| "none".into()),
            100.0 * self.r_value
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let os = self.os.map(|o| format!("{:.1}", 100.0 * o)).unwrap_or_else(|| "none".into());
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}", "P", "R", "F1", "OS", "R-val")?;
        write!(
            f,
            "{:>8.1} {:>8.1} {:>8.1} {:>8} {:>8.1}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            os,
            100.0 * self.r_value
        )
    }
}

/// Reference boundaries for one utterance with its duration.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub id: String,
    pub times: Vec<f64>,
    pub duration: f64,
}

/// Drops boundaries at the utterance start or end.
pub fn strip_edges(times: &[f64], duration: f64) -> Vec<f64> {
    const EDGE: f64 = 1e-6;
    times.iter().copied().filter(|&t| t > EDGE && t < duration - EDGE).collect()
}

/// Loads reference boundaries for every manifest entry at `level`.
pub fn load_references(manifest: &Manifest, level: Level, sample_rate: u32) -> Result<Vec<Reference>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (path, format) = match level {
                Level::Phoneme => (&e.phn, AlignmentFormat::TimitPhn),
                Level::Word => (&e.wrd, AlignmentFormat::TimitWrd),
            };
            let ann = parse_alignments(path, format, sample_rate)?;
            Ok(Reference { id: e.id(), times: ann.times, duration: wav_duration(&e.wav)? })
        })
        .collect()
}

/// Scores predictions against references. Counts are pooled over
/// utterances unless `per_utterance` is set, in which case precision,
/// recall, F1, OS and R-value are averages of per-utterance scores.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<f64>>,
    refs: &[Reference],
    tol: f64,
    per_utterance: bool,
) -> Result<EvalReport> {
    let ref_ids: BTreeSet<&str> = refs.iter().map(|r| r.id.as_str()).collect();
    let missing: Vec<String> = ref_ids.iter().filter(|id| !preds.contains_key(**id)).map(|s| s.to_string()).collect();
    let extra: Vec<String> = preds.keys().filter(|id| !ref_ids.contains(id.as_str())).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::IdMismatch { missing, extra });
    }
    let matches: Vec<MatchResult> = refs
        .par_iter()
        .map(|r| {
            let pred = strip_edges(&preds[&r.id], r.duration);
            check_sorted(&pred, &r.id)?;
            let reference = strip_edges(&r.times, r.duration);
            check_sorted(&reference, &r.id)?;
            match_boundaries(&pred, &reference, tol)
        })
        .collect::<Result<_>>()?;
    let (hit, pred, refn) = matches.iter().fold((0, 0, 0), |a, m| (a.0 + m.n_hit, a.1 + m.n_pred, a.2 + m.n_ref));
    let pooled = EvalReport::from_counts(hit, pred, refn);
    if !per_utterance || matches.is_empty() {
        return Ok(pooled);
    }
    let per: Vec<EvalReport> = matches.iter().map(EvalReport::from_match).collect();
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| per.iter().map(f).sum::<f64>() / n;
    let os: Vec<f64> = per.iter().filter_map(|r| r.os).collect();
    Ok(EvalReport {
        precision: mean(&|r| r.precision),
        recall: mean(&|r| r.recall),
        f1: mean(&|r| r.f1),
        os: (!os.is_empty()).then(|| os.iter().sum::<f64>() / os.len() as f64),
        r_value: mean(&|r| r.r_value),
        ..pooled
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_arithmetic() {
        assert_eq!(match_boundaries(&[0.100], &[0.115], 0.02).unwrap().n_hit, 1);
        assert_eq!(match_boundaries(&[0.100], &[0.125], 0.02).unwrap().n_hit, 0);
        assert_eq!(match_boundaries(&[0.100], &[0.120], 0.02).unwrap().n_hit, 1);
        assert_eq!(match_boundaries(&[0.100, 0.105], &[0.100], 0.02).unwrap().n_hit, 1);
        assert!(matches!(match_boundaries(&[0.2, 0.1], &[0.1], 0.02), Err(Error::Unsorted(_))));
    }

    #[test]
    fn r_value_perfect() {
        assert_eq!(r_value(1.0, 0.0), 1.0);
        let r = EvalReport::from_counts(5, 5, 5);
        assert_eq!((r.precision, r.recall, r.f1, r.os, r.r_value), (1.0, 1.0, 1.0, Some(0.0), 1.0));
    }

    #[test]
    fn published_rows() {
        let r = EvalReport::from_precision_recall(0.307, 0.180);
        assert!((100.0 * r.f1 - 22.7).abs() < 0.05);
        assert!((100.0 * r.r_value - 39.712).abs() < 1e-3);
        let r = EvalReport::from_precision_recall(0.155, 0.810);
        assert!((100.0 * r.r_value - (-267.626)).abs() < 1e-3);
        let r = EvalReport::from_precision_recall(0.317, 0.138);
        assert!((100.0 * r.f1 - 19.2).abs() < 0.15);
        assert!((100.0 * r.os.unwrap() - (-56.467)).abs() < 1e-3);
        assert!((100.0 * r.r_value - 37.964).abs() < 1e-3);
        let r = EvalReport::from_precision_recall(0.8463, 0.8604);
        assert!((100.0 * r.f1 - 85.33).abs() < 0.01);
        assert!((100.0 * r.r_value - 87.44).abs() < 0.01);
    }

    #[test]
    fn empty_predictions() {
        let r = EvalReport::from_counts(0, 0, 4);
        assert_eq!((r.precision, r.recall, r.f1, r.os), (0.0, 0.0, 0.0, None));
        assert!(r.to_kv().contains("os=none"));
    }

    #[test]
    fn evaluate_pools_and_strips_edges() {
        let refs = vec![
            Reference { id: "a".into(), times: vec![0.0, 0.1, 0.2, 0.3], duration: 0.3 },
            Reference { id: "b".into(), times: vec![0.15, 0.4], duration: 0.4 },
        ];
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), vec![0.1, 0.21]);
        preds.insert("b".to_string(), vec![0.05, 0.3]);
        let r = evaluate(&preds, &refs, 0.02, false).unwrap();
        assert_eq!((r.n_hit, r.n_pred, r.n_ref), (2, 4, 3));
        let avg = evaluate(&preds, &refs, 0.02, true).unwrap();
        assert!((avg.recall - 0.5).abs() < 1e-12);
        preds.remove("b");
        preds.insert("c".into(), vec![]);
        match evaluate(&preds, &refs, 0.02, false) {
            Err(Error::IdMismatch { missing, extra }) => assert_eq!((missing, extra), (vec!["b".into()], vec!["c".into()])),
            other => panic!("{other:?}"),
        }
    }
}
