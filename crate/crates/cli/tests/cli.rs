use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scpc::audio::{write_simple_times, write_wav, Level, Manifest, ManifestEntry, SampleFormat, Waveform};
use scpc::metrics::load_references;

const TINY: &str = "p = 8\nq = 8\nbatch_size = 4\nepochs = 2\nadd_nsc_epoch = 1\nlr = 0.003\n";

fn scpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scpc"))
        .args(args)
        .env_remove("SCPC_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scpc(args);
    assert!(out.status.success(), "scpc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    ok(&["--seed", &seed.to_string(), "synth", "--out", s(dir), "--n", &n.to_string()]);
    dir.join("manifest.tsv")
}

fn kv_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_train_segment_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let train_m = synth(&tmp.path().join("train"), 12, 3);
    let val_m = synth(&tmp.path().join("val"), 4, 4);
    let cfg = tmp.path().join("tiny.kv");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--manifest", s(&train_m), "--val", s(&val_m), "--config", s(&cfg), "--out", s(&run)]);
    for f in ["config.txt", "metrics.jsonl", "last.ckpt", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let ckpt = run.join("final.ckpt");
    for level in ["phoneme", "word"] {
        let seg = tmp.path().join(format!("seg_{level}"));
        ok(&["segment", "--ckpt", s(&ckpt), "--manifest", s(&val_m), "--level", level, "--out", s(&seg)]);
        assert_eq!(fs::read_to_string(seg.join("manifest.tsv")).unwrap().lines().count(), 4);
        assert!(seg.join("config.kv").exists() && seg.join("report.tsv").exists());
        let stdout = ok(&["eval", "--pred", s(&seg), "--ref", s(&val_m), "--level", level, "--tol", "0.020"]);
        assert!(kv_value(&stdout, "r_value").is_finite(), "{stdout}");
    }

    let tuned = ok(&["tune", "--ckpt", s(&ckpt), "--manifest", s(&val_m), "--level", "phoneme"]);
    assert!(tuned.starts_with("phoneme prominence "), "{tuned}");
}

#[test]
fn empty_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(tmp.path(), 0, 1);
    assert_eq!(fs::read_to_string(m).unwrap(), "");
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, 5, 9);
    synth(&b, 5, 9);
    synth(&c, 5, 10);
    let first = dir_contents(&a);
    assert_eq!(first.len(), 5 * 3 + 2);
    assert_eq!(first, dir_contents(&b));
    assert_ne!(first, dir_contents(&c));
}

#[test]
fn references_as_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("corpus"), 6, 2);
    for level in [Level::Phoneme, Level::Word] {
        let pred = tmp.path().join(format!("pred_{level}"));
        fs::create_dir_all(&pred).unwrap();
        for r in load_references(&Manifest::load(&m).unwrap(), level, 16_000).unwrap() {
            write_simple_times(pred.join(format!("{}.txt", r.id)), &r.times).unwrap();
        }
        let stdout = ok(&["eval", "--pred", s(&pred), "--ref", s(&m), "--level", &level.to_string()]);
        assert_eq!(kv_value(&stdout, "r_value"), 100.0, "{stdout}");
        assert_eq!(kv_value(&stdout, "f1"), 100.0);
        assert!(stdout.contains("r_value=100.0"));
    }
}

#[test]
fn unknown_config_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("corpus"), 4, 1);
    let cfg = tmp.path().join("bad.kv");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\nwidth = 3\n").unwrap();
    let out = scpc(&["train", "--manifest", s(&m), "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].contains("learning_rate") && lines[0].contains("width"), "{err}");
    assert!(!tmp.path().join("run").join("last.ckpt").exists());
}

#[test]
fn missing_manifest_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scpc(&["eval", "--pred", s(tmp.path()), "--ref", s(&tmp.path().join("nope.tsv")), "--level", "word"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope.tsv"));
}

#[test]
fn short_utterance_gives_empty_boundary_file() {
    let tmp = tempfile::tempdir().unwrap();
    let train_m = synth(&tmp.path().join("train"), 8, 5);
    let cfg = tmp.path().join("tiny.kv");
    fs::write(&cfg, "p = 8\nq = 8\nbatch_size = 4\nepochs = 1\n").unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--manifest", s(&train_m), "--config", s(&cfg), "--out", s(&run)]);

    let short = tmp.path().join("short");
    fs::create_dir_all(&short).unwrap();
    let wave = Waveform::new("tiny", vec![0.1; 300], 16_000).unwrap();
    write_wav(short.join("tiny.wav"), &wave, SampleFormat::Pcm16).unwrap();
    fs::write(short.join("tiny.phn"), "0 300 a\n").unwrap();
    fs::write(short.join("tiny.wrd"), "0 300 w\n").unwrap();
    let m = short.join("manifest.tsv");
    Manifest {
        entries: vec![ManifestEntry { wav: short.join("tiny.wav"), phn: short.join("tiny.phn"), wrd: short.join("tiny.wrd") }],
    }
    .save(&m)
    .unwrap();

    let seg = tmp.path().join("seg");
    let out = Command::new(env!("CARGO_BIN_EXE_scpc"))
        .args(["segment", "--ckpt", s(&run.join("final.ckpt")), "--manifest", s(&m), "--level", "phoneme", "--out", s(&seg)])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("WARN") && err.contains("tiny"), "{err}");
    assert_eq!(fs::read_to_string(seg.join("tiny.txt")).unwrap(), "");
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("corpus"), 8, 6);
    let cfg = tmp.path().join("tiny.kv");
    fs::write(&cfg, "p = 8\nq = 8\nbatch_size = 4\nepochs = 1\n").unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--manifest", s(&m), "--config", s(&cfg), "--out", s(&run)]);

    let mut bytes = fs::read(run.join("final.ckpt")).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    let bad = tmp.path().join("future.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = scpc(&["segment", "--ckpt", s(&bad), "--manifest", s(&m), "--level", "word", "--out", s(&tmp.path().join("seg"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("version 7"), "{err}");
}

#[test]
fn thres_sweep_emits_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let train_m = synth(&tmp.path().join("train"), 8, 7);
    let val_m = synth(&tmp.path().join("val"), 3, 8);
    let cfg = tmp.path().join("tiny.kv");
    fs::write(&cfg, "p = 4\nq = 4\nbatch_size = 4\nepochs = 1\nadd_nsc_epoch = 0\n").unwrap();
    let out = tmp.path().join("sweep");
    let values = "0,0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1";
    let stdout = ok(&[
        "sweep", "--grid", "thres", "--values", values, "--manifest", s(&train_m), "--val", s(&val_m), "--config", s(&cfg),
        "--out", s(&out),
    ]);
    let table = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(table, stdout);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 11);
    assert!(rows[0].starts_with("0\t") && rows[10].starts_with("0.1\t"), "{table}");
    assert!(out.join("config.kv").exists());
    assert!(out.join("thres_0.05").join("final.ckpt").exists());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("corpus"), 8, 11);
    let cfg = tmp.path().join("tiny.kv");
    fs::write(&cfg, "p = 4\nq = 4\nbatch_size = 4\nepochs = 1\nseed = 1\n").unwrap();
    let train = |seed: &str, name: &str| {
        let run = tmp.path().join(name);
        ok(&["--seed", seed, "train", "--manifest", s(&m), "--config", s(&cfg), "--out", s(&run)]);
        fs::read(run.join("final.ckpt")).unwrap()
    };
    let a = train("42", "a");
    assert_eq!(a, train("42", "b"));
    assert_ne!(a, train("43", "c"));
}
