//! Optimization loop, checkpoints and parameter sweeps.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{Optimizer, TrainConfig, CONFIG_KEYS, ENV_PREFIX};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Level, Waveform};
use crate::corpus::Corpus;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::infer::{pick_all, prominence_grid, score_tracks, tune_prominence};
use crate::metrics::{evaluate, EvalReport, DEFAULT_TOLERANCE};
use crate::model::ScpcModel;
use crate::objective::{batch_loss, LossConfig};
use crate::rng::mix_seed;

/// Optimizer progress. `epoch` counts completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub adam_t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per completed epoch: `[l_nfc, l_nsc, total]`.
    pub history: Vec<[f64; 3]>,
}

impl TrainState {
    pub fn new(model: &ScpcModel) -> Self {
        let zeros = || model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { epoch: 0, step: 0, adam_t: 0, m: zeros(), v: zeros(), history: Vec::new() }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub l_nfc: f64,
    /// `None` before the segment loss is switched on.
    pub l_nsc: Option<f64>,
    pub total: f64,
    pub nsc_active: bool,
    pub mean_segments: f64,
    pub skipped_short: usize,
    pub val_phoneme_r: Option<f64>,
    pub val_word_r: Option<f64>,
    pub val_phoneme_f1: Option<f64>,
    pub val_word_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for the config echo, metrics log and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete, keeping the configured total.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

fn apply_update(model: &mut ScpcModel, state: &mut TrainState, mut grads: Vec<Vec<f64>>, cfg: &TrainConfig) {
    let norm = global_norm(&grads);
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in model.params_mut().into_iter().zip(&grads) {
                p.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= cfg.lr * g);
            }
        }
        Optimizer::Adam => {
            state.adam_t += 1;
            let t = state.adam_t as i32;
            let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
            let params = model.params_mut().into_iter().zip(state.m.iter_mut()).zip(state.v.iter_mut());
            for (((p, m), v), g) in params.zip(&grads) {
                let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g);
                for (((w, m), v), &g) in it {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Epoch order of utterance indices.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5EED, epoch as u64])));
    idx
}

/// Validation scores at fixed prominences.
pub fn validation_scores(model: &ScpcModel, val: &Corpus, cfg: &TrainConfig) -> Result<(EvalReport, EvalReport)> {
    let ph = score_tracks(model, &val.waves, Level::Phoneme, cfg.thres, false)?;
    let wd = score_tracks(model, &val.waves, Level::Word, cfg.thres, cfg.normalize_word_scores)?;
    Ok((
        evaluate(&pick_all(&ph, cfg.phoneme_prominence), &val.phoneme, DEFAULT_TOLERANCE, false)?,
        evaluate(&pick_all(&wd, cfg.word_prominence), &val.word, DEFAULT_TOLERANCE, false)?,
    ))
}

struct Output {
    dir: PathBuf,
    log: std::fs::File,
}

impl Output {
    fn open(dir: &Path, cfg: &TrainConfig, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.txt");
        std::fs::write(&cfg_path, cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join("metrics.jsonl");
        let log = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn record(&mut self, entry: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(entry).expect("serializable");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }
}

/// Trains on `train`, optionally scoring `val` after every epoch.
///
/// With an output directory the resolved config goes to `config.txt`, one
/// JSON record per epoch to `metrics.jsonl`, the latest completed epoch to
/// `last.ckpt`, periodic snapshots to `epoch_NNN.ckpt` and the result to
/// `final.ckpt`. A non-finite loss or parameter stops training with
/// [`Error::Diverged`]; `last.ckpt` then still holds the last good state.
pub fn train(train: &Corpus, val: Option<&Corpus>, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < config.batch_size {
        return Err(Error::Invalid(format!(
            "{} training utterances is fewer than batch_size {}",
            train.len(),
            config.batch_size
        )));
    }
    let (mut model, mut state) = match &opts.resume {
        Some(ck) => {
            if ck.config.model_config() != config.model_config() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has p={} q={}, config asks for p={} q={}",
                    ck.config.p, ck.config.q, config.p, config.q
                )));
            }
            (ck.model.clone(), ck.state.clone())
        }
        None => {
            let model = ScpcModel::init(config.model_config(), mix_seed(config.seed, &[0x1A17]));
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    let mut out = match &opts.out_dir {
        Some(d) => Some(Output::open(d, config, opts.resume.is_some())?),
        None => None,
    };
    let last_path = opts.out_dir.as_ref().map(|d| d.join("last.ckpt"));
    let end = opts.stop_after.unwrap_or(config.epochs).min(config.epochs);
    let mut log = Vec::new();
    while state.epoch < end {
        let epoch = state.epoch;
        let started = Instant::now();
        let lc = LossConfig {
            thres: config.thres,
            k_frame: config.k_frame,
            k_seg: config.k_seg,
            nsc_active: epoch >= config.add_nsc_epoch,
        };
        let (mut nfc_sum, mut nfc_n, mut nsc_sum, mut nsc_n) = (0.0, 0usize, 0.0, 0usize);
        let (mut segs, mut utts, mut skipped) = (0usize, 0usize, 0usize);
        let order = epoch_order(config.seed, epoch, train.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Waveform> = chunk.iter().map(|&i| &train.waves[i]).collect();
            let step = state.step;
            let diverged = |detail: String| Error::Diverged { epoch, step, detail, last_good: last_path.clone() };
            let (rep, grads) = match batch_loss(&model, &batch, chunk, &lc, config.seed, epoch, state.step, true) {
                Ok(r) => r,
                Err(Error::NonFinite { id }) => return Err(diverged(format!("non-finite loss on `{id}`"))),
                Err(e) => return Err(e),
            };
            let grads = grads.expect("requested");
            if !global_norm(&grads).is_finite() {
                return Err(diverged("non-finite gradient".into()));
            }
            apply_update(&mut model, &mut state, grads, config);
            if model.params().iter().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite parameters after update".into()));
            }
            state.step += 1;
            if rep.nfc_utts > 0 {
                nfc_sum += rep.l_nfc;
                nfc_n += 1;
            }
            if rep.nsc_utts > 0 {
                nsc_sum += rep.l_nsc;
                nsc_n += 1;
            }
            segs += rep.segments;
            utts += rep.utterances;
            skipped += rep.skipped_short;
        }
        let l_nfc = if nfc_n > 0 { nfc_sum / nfc_n as f64 } else { 0.0 };
        let l_nsc = if nsc_n > 0 { nsc_sum / nsc_n as f64 } else { 0.0 };
        let total = l_nfc + if lc.nsc_active { l_nsc } else { 0.0 };
        state.epoch += 1;
        state.history.push([l_nfc, l_nsc, total]);
        let (vp, vw) = match val {
            Some(v) if !v.is_empty() => {
                let (p, w) = validation_scores(&model, v, config)?;
                (Some(p), Some(w))
            }
            _ => (None, None),
        };
        let entry = EpochLog {
            epoch,
            step: state.step,
            l_nfc,
            l_nsc: lc.nsc_active.then_some(l_nsc),
            total,
            nsc_active: lc.nsc_active,
            mean_segments: segs as f64 / utts.max(1) as f64,
            skipped_short: skipped,
            val_phoneme_r: vp.map(|r| r.r_value),
            val_word_r: vw.map(|r| r.r_value),
            val_phoneme_f1: vp.map(|r| r.f1),
            val_word_f1: vw.map(|r| r.f1),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: l_nfc {l_nfc:.4} l_nsc {} mean M {:.2}{}",
            entry.l_nsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "inactive".into()),
            entry.mean_segments,
            match (vp, vw) {
                (Some(p), Some(w)) => format!(" val R {:.3}/{:.3}", p.r_value, w.r_value),
                _ => String::new(),
            }
        );
        if let Some(o) = out.as_mut() {
            o.record(&entry)?;
            let ck = Checkpoint { config: config.clone(), model: model.clone(), state: state.clone() };
            ck.save(o.dir.join("last.ckpt"))?;
            if config.checkpoint_interval > 0 && state.epoch % config.checkpoint_interval == 0 {
                ck.save(o.dir.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
            }
        }
        log.push(entry);
    }
    let checkpoint = Checkpoint { config: config.clone(), model, state };
    if let Some(o) = &out {
        checkpoint.save(o.dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Thres,
    NscEpoch,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Thres => "thres",
            SweepParam::NscEpoch => "nsc_epoch",
        })
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "thres" => Ok(SweepParam::Thres),
            "nsc_epoch" | "add_nsc_epoch" => Ok(SweepParam::NscEpoch),
            _ => Err(format!("expected thres or nsc_epoch, got `{s}`")),
        }
    }
}

impl SweepParam {
    /// `0.00..=0.10` step 0.01 for thres, `0..=10` for the NSC start epoch.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Thres => (0..=10).map(|i| i as f64 / 100.0).collect(),
            SweepParam::NscEpoch => (0..=10).map(f64::from).collect(),
        }
    }

    pub fn apply(self, config: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = config.clone();
        match self {
            SweepParam::Thres => c.thres = value,
            SweepParam::NscEpoch => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Invalid(format!("add_nsc_epoch must be a whole number, got {value}")));
                }
                c.add_nsc_epoch = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    /// Mean segments per utterance over the final training epoch.
    pub mean_segments: f64,
    pub final_loss: f64,
    pub phoneme_prominence: f64,
    pub word_prominence: f64,
    pub phoneme: EvalReport,
    pub word: EvalReport,
}

/// Tunes both prominences on `eval` and reports the tuned scores.
pub fn evaluate_tuned(model: &ScpcModel, eval: &Corpus, config: &TrainConfig) -> Result<[(f64, EvalReport); 2]> {
    let grid = prominence_grid();
    let ph = score_tracks(model, &eval.waves, Level::Phoneme, config.thres, false)?;
    let wd = score_tracks(model, &eval.waves, Level::Word, config.thres, config.normalize_word_scores)?;
    let p = tune_prominence(&ph, &eval.phoneme, &grid, DEFAULT_TOLERANCE)?;
    let w = tune_prominence(&wd, &eval.word, &grid, DEFAULT_TOLERANCE)?;
    Ok([(p.prominence, p.report), (w.prominence, w.report)])
}

/// One full train and evaluation per grid value. With `out_dir` each run
/// writes into `<out_dir>/<param>_<value>/`.
pub fn sweep(
    train_set: &Corpus,
    eval: &Corpus,
    config: &TrainConfig,
    param: SweepParam,
    grid: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty sweep grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let cfg = param.apply(config, value)?;
        let opts = TrainOptions { out_dir: out_dir.map(|d| d.join(format!("{param}_{value}"))), ..Default::default() };
        let outcome = train(train_set, None, &cfg, &opts)?;
        let [(pp, ph), (wp, wd)] = evaluate_tuned(&outcome.checkpoint.model, eval, &cfg)?;
        let last = outcome.log.last();
        let row = SweepRow {
            param,
            value,
            mean_segments: last.map_or(0.0, |l| l.mean_segments),
            final_loss: last.map_or(f64::NAN, |l| l.total),
            phoneme_prominence: pp,
            word_prominence: wp,
            phoneme: ph,
            word: wd,
        };
        log::info!(
            "{param}={value}: mean M {:.2}, phoneme R {:.3}, word R {:.3}",
            row.mean_segments,
            ph.r_value,
            wd.r_value
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Tab-separated table, one row per grid value; scores in percent.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let param = rows.first().map_or("value".to_string(), |r| r.param.to_string());
    let _ = writeln!(
        s,
        "{param}\tmean_segments\tfinal_loss\tphoneme_prominence\tphoneme_f1\tphoneme_r_value\tword_prominence\tword_f1\tword_r_value"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.3}\t{:.4}\t{:.2}\t{:.1}\t{:.1}\t{:.2}\t{:.1}\t{:.1}",
            r.value,
            r.mean_segments,
            r.final_loss,
            r.phoneme_prominence,
            100.0 * r.phoneme.f1,
            100.0 * r.phoneme.r_value,
            r.word_prominence,
            100.0 * r.word.f1,
            100.0 * r.word.r_value
        );
    }
    s
}
