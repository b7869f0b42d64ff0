//! Contrastive objectives: next-frame (NFC) and next-segment (NSC)
//! classification against distractors from the same utterance.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::boundary::segment_on;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{context_on, encode_frames_on, encode_segments_on, waveform_input, BoundParams, ScpcModel};
use crate::rng::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatchSpec {
    pub k_frame: usize,
    pub k_seg: usize,
    pub seed: u64,
}

impl Default for ContrastiveBatchSpec {
    fn default() -> Self {
        Self { k_frame: 10, k_seg: 5, seed: 0 }
    }
}

/// Batch losses; `total = l_nfc + l_nsc`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_nfc: f64,
    pub l_nsc: f64,
    pub total: f64,
    pub nsc_active: bool,
    /// Utterances contributing to each loss.
    pub nfc_utts: usize,
    pub nsc_utts: usize,
    /// Utterances with too few frames for `k_frame` distractors.
    pub skipped_short: usize,
    /// Utterances with a single segment while NSC was active.
    pub single_segment: usize,
    pub nfc_anchors: usize,
    pub nsc_anchors: usize,
    /// Sum of segment counts, for mean-M statistics.
    pub segments: usize,
    pub utterances: usize,
}

/// Draws `min(k, n - 2)` distinct indices from `0..n` excluding `anchor` and
/// `positive`.
pub fn sample_distractors(rng: &mut impl Rng, n: usize, anchor: usize, positive: usize, k: usize) -> Vec<usize> {
    let (lo, hi) = if anchor < positive { (anchor, positive) } else { (positive, anchor) };
    let pool = n.saturating_sub(if lo == hi { 1 } else { 2 });
    let k = k.min(pool);
    sample(rng, pool, k)
        .into_iter()
        .map(|mut i| {
            if i >= lo {
                i += 1;
            }
            if lo != hi && i >= hi {
                i += 1;
            }
            i
        })
        .collect()
}

/// Mean cross-entropy of rows of `sims` (`[n, 1 + k]`) with the positive in column 0.
pub fn info_nce(tape: &mut Tape, sims: Var) -> Result<Var> {
    let n = tape.value(sims).rows();
    let ce = tape.softmax_cross_entropy_with_index(sims, &vec![0; n])?;
    Ok(tape.mean_all(ce)?)
}

/// Next-frame classification loss over every anchor `t = 0..L-2`.
///
/// Returns `None` when `L < k + 2`.
pub fn nfc_loss(tape: &mut Tape, z: Var, k: usize, rng: &mut impl Rng) -> Result<Option<Var>> {
    let l = tape.value(z).rows();
    if k == 0 || l < k + 2 {
        return Ok(None);
    }
    let sim = tape.cosine_matrix(z, z)?;
    let mut idx = Vec::with_capacity((l - 1) * (k + 1));
    for t in 0..l - 1 {
        idx.push(t * l + t + 1);
        idx.extend(sample_distractors(rng, l, t, t + 1, k).into_iter().map(|j| t * l + j));
    }
    let logits = tape.gather(sim, &idx, &[l - 1, k + 1])?;
    Ok(Some(info_nce(tape, logits)?))
}

/// Next-segment classification loss with context rows `c` against segment
/// rows `s`, anchors `t = 0..M-2`. With fewer than `k` eligible segments all
/// of them are used. Returns `None` when `M < 2`.
pub fn nsc_loss(tape: &mut Tape, s: Var, c: Var, k: usize, rng: &mut impl Rng) -> Result<Option<Var>> {
    let m = tape.value(s).rows();
    if m < 2 {
        return Ok(None);
    }
    let k_eff = k.min(m - 2);
    let sim = tape.cosine_matrix(c, s)?;
    let mut idx = Vec::with_capacity((m - 1) * (k_eff + 1));
    for t in 0..m - 1 {
        idx.push(t * m + t + 1);
        idx.extend(sample_distractors(rng, m, t, t + 1, k_eff).into_iter().map(|j| t * m + j));
    }
    let logits = tape.gather(sim, &idx, &[m - 1, k_eff + 1])?;
    Ok(Some(info_nce(tape, logits)?))
}

/// Settings for one forward pass of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub thres: f64,
    pub k_frame: usize,
    pub k_seg: usize,
    pub nsc_active: bool,
}

/// Recorded graph of one utterance.
pub struct UtteranceGraph {
    pub id: String,
    pub tape: Tape,
    pub params: BoundParams,
    pub z: Var,
    pub nfc: Option<Var>,
    pub nsc: Option<Var>,
    pub n_segments: usize,
    pub nfc_anchors: usize,
    pub nsc_anchors: usize,
}

/// Frame encoder, boundary stage and (when active) the segment branch for
/// one utterance.
pub fn forward_utterance(model: &ScpcModel, wave: &Waveform, cfg: &LossConfig, rng: &mut impl Rng) -> Result<UtteranceGraph> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = waveform_input(&mut tape, wave)?;
    let z = encode_frames_on(&mut tape, &params, x)?;
    let l = tape.value(z).rows();
    let nfc = nfc_loss(&mut tape, z, cfg.k_frame, rng)?;
    let nfc_anchors = if nfc.is_some() { l - 1 } else { 0 };
    let (mut nsc, mut n_segments, mut nsc_anchors) = (None, 1, 0);
    if l >= 2 {
        let seg = segment_on(&mut tape, z, cfg.thres)?;
        n_segments = seg.weights.n_segments();
        if cfg.nsc_active && n_segments >= 2 {
            let s = encode_segments_on(&mut tape, &params, seg.means)?;
            let c = context_on(&mut tape, &params, s)?;
            nsc = nsc_loss(&mut tape, s, c, cfg.k_seg, rng)?;
            nsc_anchors = n_segments - 1;
        }
    }
    for v in [nfc, nsc].into_iter().flatten() {
        if !tape.value(v).item().is_finite() {
            return Err(Error::NonFinite { id: wave.id.clone() });
        }
    }
    Ok(UtteranceGraph { id: wave.id.clone(), tape, params, z, nfc, nsc, n_segments, nfc_anchors, nsc_anchors })
}

/// Sampling stream for one utterance at one optimizer step.
pub fn utterance_rng(seed: u64, epoch: usize, step: usize, utt: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xC0DE, epoch as u64, step as u64, utt as u64]))
}

/// Losses for a batch and, optionally, the gradient of `total` for every
/// parameter (in [`ScpcModel::params`] order).
///
/// Each loss is the mean over anchors within an utterance, then the mean over
/// the utterances that contribute to it. `utt_ids` are the stable corpus
/// indices used to key distractor sampling.
pub fn batch_loss(
    model: &ScpcModel,
    batch: &[&Waveform],
    utt_ids: &[usize],
    cfg: &LossConfig,
    seed: u64,
    epoch: usize,
    step: usize,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<Vec<f64>>>)> {
    let graphs: Vec<UtteranceGraph> = batch
        .par_iter()
        .zip(utt_ids.par_iter())
        .map(|(w, &u)| {
            let mut rng = utterance_rng(seed, epoch, step, u);
            forward_utterance(model, w, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut rep = LossReport { nsc_active: cfg.nsc_active, utterances: batch.len(), ..Default::default() };
    for g in &graphs {
        rep.segments += g.n_segments;
        match g.nfc {
            Some(v) => {
                rep.nfc_utts += 1;
                rep.l_nfc += g.tape.value(v).item();
                rep.nfc_anchors += g.nfc_anchors;
            }
            None => rep.skipped_short += 1,
        }
        match g.nsc {
            Some(v) => {
                rep.nsc_utts += 1;
                rep.l_nsc += g.tape.value(v).item();
                rep.nsc_anchors += g.nsc_anchors;
            }
            None if cfg.nsc_active => rep.single_segment += 1,
            None => {}
        }
    }
    if rep.skipped_short > 0 {
        log::warn!("{} utterance(s) too short for {} frame distractors were skipped", rep.skipped_short, cfg.k_frame);
    }
    let (w_nfc, w_nsc) = (inv(rep.nfc_utts), inv(rep.nsc_utts));
    rep.l_nfc *= w_nfc;
    rep.l_nsc *= w_nsc;
    rep.total = rep.l_nfc + rep.l_nsc;
    if !want_grad {
        return Ok((rep, None));
    }

    let per_utt: Vec<Option<Vec<Vec<f64>>>> = graphs
        .into_par_iter()
        .map(|mut g| -> Result<Option<Vec<Vec<f64>>>> {
            let mut terms = Vec::new();
            if let Some(v) = g.nfc {
                terms.push(g.tape.scale(v, w_nfc)?);
            }
            if let Some(v) = g.nsc {
                terms.push(g.tape.scale(v, w_nsc)?);
            }
            let Some(&first) = terms.first() else { return Ok(None) };
            let loss = terms[1..].iter().try_fold(first, |acc, &t| g.tape.add(acc, t))?;
            let grads = g.tape.backward(loss)?;
            let params = g.params.all();
            Ok(Some(params.iter().map(|&p| grads.get_or_zeros(p, g.tape.value(p).numel())).collect()))
        })
        .collect::<Result<_>>()?;

    let mut total: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.numel()]).collect();
    for grads in per_utt.into_iter().flatten() {
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((rep, Some(total)))
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// Joint loss at `epoch`; the segment term joins once `epoch >= add_nsc_epoch`.
pub fn total_loss(
    model: &ScpcModel,
    batch: &[&Waveform],
    thres: f64,
    spec: &ContrastiveBatchSpec,
    epoch: usize,
    add_nsc_epoch: usize,
) -> Result<LossReport> {
    let cfg = LossConfig { thres, k_frame: spec.k_frame, k_seg: spec.k_seg, nsc_active: epoch >= add_nsc_epoch };
    let ids: Vec<usize> = (0..batch.len()).collect();
    Ok(batch_loss(model, batch, &ids, &cfg, spec.seed, epoch, 0, false)?.0)
}
