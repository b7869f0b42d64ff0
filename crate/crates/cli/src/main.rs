use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use scpc::audio::{
    load_wav, parse_alignments, resample_linear, synth_corpus, write_corpus, write_simple_times, AlignmentFormat,
    Level, Manifest, SynthSpec, Waveform,
};
use scpc::corpus::Corpus;
use scpc::infer::{phoneme_track, prominence_grid, score_tracks, tune_prominence, word_track};
use scpc::metrics::{evaluate, load_references, DEFAULT_TOLERANCE};
use scpc::model::SAMPLE_RATE;
use scpc::trainer::{sweep, sweep_table, train, Checkpoint, SweepParam, TrainConfig, TrainOptions};

/// Segmental contrastive predictive coding: unsupervised phoneme and word
/// boundary detection from raw audio.
#[derive(Parser)]
#[command(name = "scpc", version)]
struct Cli {
    /// Seed for every random choice; overrides the seed in spec and config files.
    #[arg(long, global = true, env = "SCPC_SEED")]
    seed: Option<u64>,
    /// Worker threads for per-utterance parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with phoneme and word alignments.
    Synth {
        /// `key = value` corpus spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Held-out manifest scored after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write predicted boundaries for every utterance of a manifest.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        level: Level,
        /// Peak prominence; defaults to the value stored in the checkpoint config.
        #[arg(long)]
        prominence: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted boundaries against reference alignments.
    Eval {
        /// Directory of `<id>.txt` boundary files.
        #[arg(long)]
        pred: PathBuf,
        /// Manifest with the reference alignments.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        level: Level,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        /// Average per-utterance scores instead of pooling counts.
        #[arg(long)]
        per_utterance: bool,
        /// Also write the report as `key=value` lines into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per grid value.
    Sweep {
        #[arg(long, value_parser = parse_sweep_param)]
        grid: SweepParam,
        /// Comma-separated grid values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest used to tune prominences and report scores.
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the peak prominence that maximizes R-value on a labelled set.
    Tune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        level: Level,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// `key = value` training config; `SCPC_<KEY>` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_sweep_param(s: &str) -> Result<SweepParam, String> {
    s.parse()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<TrainConfig> {
    let text = match &arg.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::from_kv_with_env(&text).with_context(|| match &arg.config {
        Some(p) => format!("config {}", p.display()),
        None => "config from environment".to_string(),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(Manifest::load(path)?)
}

fn load_waves(manifest: &Manifest, resample: bool) -> Result<Vec<Waveform>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let w = load_wav(&e.wav)?;
            if w.sample_rate == SAMPLE_RATE {
                Ok(w)
            } else if resample {
                Ok(resample_linear(&w, SAMPLE_RATE))
            } else {
                Err(scpc::Error::SampleRate { id: w.id, rate: w.sample_rate }.into())
            }
        })
        .collect()
}

fn cmd_synth(spec: Option<&Path>, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SynthSpec::from_kv(&read_text(p)?).with_context(|| format!("spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    create_dir(out)?;
    let utts = synth_corpus(&spec, n)?;
    let manifest = write_corpus(&utts, out)?;
    manifest.save(out.join("manifest.tsv"))?;
    write_file(&out.join("spec.kv"), &spec.to_kv())?;
    log::info!("wrote {} utterances to {}", n, out.display());
    Ok(())
}

fn cmd_train(
    manifest: &Path,
    val: Option<&Path>,
    cfg: TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let train_set = Corpus::load(&load_manifest(manifest)?, cfg.resample)?;
    let val_set = match val {
        Some(p) => Some(Corpus::load(&load_manifest(p)?, cfg.resample)?),
        None => None,
    };
    let resume = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume, stop_after: None };
    let outcome = train(&train_set, val_set.as_ref(), &cfg, &opts)?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {} total loss {:.4}; checkpoint {}", last.epoch, last.total, out.join("final.ckpt").display());
    }
    Ok(())
}

fn cmd_segment(ckpt: &Path, manifest: &Path, level: Level, prominence: Option<f64>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.config;
    let prominence = prominence.unwrap_or(match level {
        Level::Phoneme => cfg.phoneme_prominence,
        Level::Word => cfg.word_prominence,
    });
    if !(prominence >= 0.0) {
        bail!("prominence must be non-negative, got {prominence}");
    }
    let m = load_manifest(manifest)?;
    let waves = load_waves(&m, cfg.resample)?;
    create_dir(out)?;
    let results: Vec<(String, usize, f64)> = waves
        .par_iter()
        .map(|w| -> Result<(String, usize, f64)> {
            let track = match level {
                Level::Phoneme => phoneme_track(&ck.model, w)?,
                Level::Word => word_track(&ck.model, w, cfg.thres, cfg.normalize_word_scores)?,
            };
            let pred = track.pick(prominence);
            write_simple_times(out.join(format!("{}.txt", w.id)), &pred.times)?;
            Ok((w.id.clone(), pred.times.len(), w.duration()))
        })
        .collect::<Result<_>>()?;
    let mut listing = String::new();
    let mut report = String::from("id\tboundaries\tduration\n");
    for (id, n, dur) in &results {
        let _ = writeln!(listing, "{id}\t{id}.txt");
        let _ = writeln!(report, "{id}\t{n}\t{dur:.3}");
    }
    write_file(&out.join("manifest.tsv"), &listing)?;
    write_file(&out.join("report.tsv"), &report)?;
    let echo = format!(
        "checkpoint = {}\nmanifest = {}\nlevel = {level}\nprominence = {prominence}\n{}",
        ckpt.display(),
        manifest.display(),
        cfg.to_kv()
    );
    write_file(&out.join("config.kv"), &echo)?;
    let total: usize = results.iter().map(|r| r.1).sum();
    println!("{} utterances, {total} {level} boundaries written to {}", results.len(), out.display());
    Ok(())
}

/// Reads predictions listed in `<dir>/manifest.tsv`, or every `*.txt` file.
fn read_predictions(dir: &Path, level: Level) -> Result<BTreeMap<String, Vec<f64>>> {
    let listing = dir.join("manifest.tsv");
    let files: Vec<(String, PathBuf)> = if listing.exists() {
        read_text(&listing)?
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let (id, file) = l.split_once('\t').unwrap_or((l, ""));
                let file = if file.is_empty() { format!("{id}.txt") } else { file.to_string() };
                (id.to_string(), dir.join(file))
            })
            .collect()
    } else {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                v.push((id, path));
            }
        }
        v
    };
    files
        .into_iter()
        .map(|(id, path)| Ok((id, parse_alignments(&path, AlignmentFormat::SimpleTimes(level), SAMPLE_RATE)?.times)))
        .collect()
}

fn cmd_eval(pred: &Path, reference: &Path, level: Level, tol: f64, per_utt: bool, out: Option<&Path>) -> Result<()> {
    if !(tol >= 0.0) {
        bail!("tolerance must be non-negative, got {tol}");
    }
    let preds = read_predictions(pred, level)?;
    let refs = load_references(&load_manifest(reference)?, level, SAMPLE_RATE)?;
    let report = evaluate(&preds, &refs, tol, per_utt)?;
    println!("{level} boundaries, tolerance {:.0} ms, {} utterances", tol * 1000.0, refs.len());
    println!("{report}");
    print!("{}", report.to_kv());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("eval.kv"), &report.to_kv())?;
        let echo = format!(
            "pred = {}\nref = {}\nlevel = {level}\ntol = {tol}\nper_utterance = {per_utt}\n",
            pred.display(),
            reference.display()
        );
        write_file(&dir.join("config.kv"), &echo)?;
    }
    Ok(())
}

fn cmd_sweep(param: SweepParam, values: Vec<f64>, manifest: &Path, val: &Path, cfg: TrainConfig, out: &Path) -> Result<()> {
    let grid = if values.is_empty() { param.default_grid() } else { values };
    let train_set = Corpus::load(&load_manifest(manifest)?, cfg.resample)?;
    let eval_set = Corpus::load(&load_manifest(val)?, cfg.resample)?;
    create_dir(out)?;
    write_file(&out.join("config.kv"), &cfg.to_kv())?;
    let rows = sweep(&train_set, &eval_set, &cfg, param, &grid, Some(out))?;
    let table = sweep_table(&rows);
    write_file(&out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_tune(ckpt: &Path, manifest: &Path, level: Level, tol: f64, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.config;
    let corpus = Corpus::load(&load_manifest(manifest)?, cfg.resample)?;
    let tracks = score_tracks(&ck.model, &corpus.waves, level, cfg.thres, cfg.normalize_word_scores)?;
    let best = tune_prominence(&tracks, corpus.references(level), &prominence_grid(), tol)?;
    println!("{level} prominence {:.2}", best.prominence);
    println!("{}", best.report);
    if let Some(dir) = out {
        create_dir(dir)?;
        let text = format!("level={level}\nprominence={:.2}\n{}", best.prominence, best.report.to_kv());
        write_file(&dir.join("tune.kv"), &text)?;
        let echo = format!("checkpoint = {}\nmanifest = {}\nlevel = {level}\ntol = {tol}\n", ckpt.display(), manifest.display());
        write_file(&dir.join("config.kv"), &echo)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot start worker pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out, n } => cmd_synth(spec.as_deref(), &out, n, seed),
        Command::Train { manifest, val, cfg, out, resume } => {
            cmd_train(&manifest, val.as_deref(), load_config(&cfg, seed)?, &out, resume.as_deref())
        }
        Command::Segment { ckpt, manifest, level, prominence, out } => cmd_segment(&ckpt, &manifest, level, prominence, &out),
        Command::Eval { pred, reference, level, tol, per_utterance, out } => {
            cmd_eval(&pred, &reference, level, tol, per_utterance, out.as_deref())
        }
        Command::Sweep { grid, values, manifest, val, cfg, out } => {
            cmd_sweep(grid, values, &manifest, &val, load_config(&cfg, seed)?, &out)
        }
        Command::Tune { ckpt, manifest, level, tol, out } => cmd_tune(&ckpt, &manifest, level, tol, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
