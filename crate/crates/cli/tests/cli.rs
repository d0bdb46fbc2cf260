use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casanet::features::{write_wav, Waveform};
use casanet::io::{read_faeb, read_rttm, save_rttm};
use casanet::refine::{read_history, HISTORY_FILE};
use casanet::Timeline;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "synth": { "sessions": 4, "session_seconds": 16, "train_ratio": 0.75 },
  "vvad": { "epochs": 1, "lr": 0.001 },
  "training": { "epochs": 1, "lr": 0.001 },
  "refine": { "epochs": 1 }
}"#;

fn casanet<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casanet"))
        .args(args)
        .output()
        .expect("spawn casanet")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> PathBuf {
        let out = self.path("corpus");
        if !out.exists() {
            stdout(&casanet(&["synth", "--config", p(&self.path("small.json")), "--out", p(&out)]));
        }
        out
    }
}

fn digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn write_pair(fx: &Fixture, name: &str, r: &[(&str, f64, f64)], h: &[(&str, f64, f64)]) -> (PathBuf, PathBuf) {
    let build = |segs: &[(&str, f64, f64)]| {
        let mut t = Timeline::new("f");
        for &(s, a, b) in segs {
            t.push(s, a, b - a).unwrap();
        }
        t
    };
    let (rp, hp) = (fx.path(&format!("{name}.ref")), fx.path(&format!("{name}.hyp")));
    save_rttm(&rp, [&build(r)]).unwrap();
    save_rttm(&hp, [&build(h)]).unwrap();
    (rp, hp)
}

#[test]
fn synth_is_reproducible() {
    let fx = Fixture::new();
    let a = fx.corpus();
    let b = fx.path("again");
    stdout(&casanet(&["synth", "--config", p(&fx.path("small.json")), "--out", p(&b)]));
    assert_eq!(digest(&a), digest(&b));
    let refs = read_rttm(a.join("ref.rttm")).unwrap();
    assert_eq!(refs.len(), 4);
    assert_eq!(read_rttm(a.join("ref_dev.rttm")).unwrap().len(), 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let fx = Fixture::new();
    let cfg = fx.path("bad.json");
    std::fs::write(&cfg, r#"{ "synth": { "sesions": 3 } }"#).unwrap();
    let out = casanet(&["synth", "--config", p(&cfg), "--out", p(&fx.path("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sesions"), "{}", stderr(&out));
}

#[test]
fn score_reports_worked_examples() {
    let fx = Fixture::new();
    let (rp, hp) = write_pair(&fx, "miss", &[("A", 0.0, 4.0), ("B", 4.0, 8.0)], &[("s1", 0.0, 3.0), ("s2", 4.0, 8.0)]);
    let text = stdout(&casanet(&["score", "--ref", p(&rp), "--hyp", p(&hp)]));
    assert!(text.lines().last().unwrap().ends_with("DER  12.50%"), "{text}");
    let (rp, hp) = write_pair(&fx, "overlap", &[("A", 0.0, 4.0), ("B", 2.0, 6.0)], &[("s1", 0.0, 6.0)]);
    let text = stdout(&casanet(&["score", "--ref", p(&rp), "--hyp", p(&hp)]));
    assert!(text.lines().last().unwrap().ends_with("DER  50.00%"), "{text}");
    let text = stdout(&casanet(&["score", "--ref", p(&rp), "--hyp", p(&rp)]));
    assert!(text.lines().last().unwrap().ends_with("DER   0.00%"), "{text}");
}

#[test]
fn missing_inputs_exit_with_usage_status() {
    let fx = Fixture::new();
    let nowhere = fx.path("absent.rttm");
    let out = casanet(&["score", "--ref", p(&nowhere), "--hyp", p(&nowhere)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.rttm"));
    let out = casanet(&["infer", "--model", p(&fx.path("none.casa")), "--corpus", p(&fx.corpus()), "--out", p(&fx.path("h"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("none.casa"));
    let out = casanet(&["score", "--ref", p(&nowhere), "--hyp", p(&nowhere), "--collar", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_infer_and_refine_write_artifacts() {
    let fx = Fixture::new();
    let corpus = fx.corpus();
    let cfg = fx.path("small.json");
    let model = fx.path("m.casa");
    stdout(&casanet(&["train", "--corpus", p(&corpus), "--out", p(&model), "--config", p(&cfg)]));
    let history: serde_json::Value = serde_json::from_slice(&std::fs::read(fx.path("m.casa.history.json")).unwrap()).unwrap();
    assert_eq!(history["casa"].as_array().unwrap().len(), 1);

    let hyp = fx.path("hyp.rttm");
    stdout(&casanet(&["infer", "--model", p(&model), "--corpus", p(&corpus), "--out", p(&hyp), "--median-window", "1"]));
    assert_eq!(read_rttm(&hyp).unwrap().len(), 1);
    let all = fx.path("all.rttm");
    stdout(&casanet(&["infer", "--model", p(&model), "--corpus", p(&corpus), "--out", p(&all), "--split", "all"]));
    assert_eq!(read_rttm(&all).unwrap().len(), 4);
    let out = casanet(&["infer", "--model", p(&model), "--corpus", p(&corpus), "--out", p(&hyp), "--median-window", "4"]);
    assert_eq!(out.status.code(), Some(2));

    let zero = fx.path("r0");
    stdout(&casanet(&["refine", "--corpus", p(&corpus), "--rounds", "0", "--out", p(&zero), "--config", p(&cfg)]));
    assert!(zero.join("round_0.rttm").exists() && !zero.join("round_1.rttm").exists());
    assert_eq!(read_history(zero.join(HISTORY_FILE)).unwrap().len(), 1);

    let two = fx.path("r2");
    stdout(&casanet(&["refine", "--corpus", p(&corpus), "--rounds", "2", "--out", p(&two), "--config", p(&cfg)]));
    let history = read_history(two.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.len(), 3);
    assert!(two.join("model.casa").exists());
    for (k, h) in history.iter().enumerate() {
        let log = two.join(format!("round_{k}.rttm"));
        let text = stdout(&casanet(&["score", "--ref", p(&corpus.join("ref_dev.rttm")), "--hyp", p(&log)]));
        assert!(
            text.lines().last().unwrap().ends_with(&format!("DER {:>6.2}%", 100.0 * h.der)),
            "round {k}: {text} vs {h:?}"
        );
    }
}

#[test]
fn fbank_writes_embedding_file() {
    let fx = Fixture::new();
    let wav = fx.path("tone.wav");
    let samples = (0..16_000).map(|i| 0.3 * (i as f64 * 0.1).sin()).collect();
    write_wav(&wav, &Waveform::new(samples, 16_000).unwrap()).unwrap();
    let out = fx.path("tone.faeb");
    stdout(&casanet(&["fbank", "--wav", p(&wav), "--out", p(&out)]));
    let block = read_faeb(&out).unwrap();
    assert_eq!(block.data.shape(), &[100, 40, 1]);
    assert_eq!(block.frame_rate, 100.0);
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["synth", "train", "infer", "refine", "score", "fbank"] {
        let text = stdout(&casanet(&[sub, "--help"]));
        assert!(text.contains("Usage"), "{sub}: {text}");
    }
}
