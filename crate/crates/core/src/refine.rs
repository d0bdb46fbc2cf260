//! Pseudo-label refinement: each round re-extracts speaker embeddings and
//! training labels from the previous round's output and retrains.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::casa::{train_casa, CasaModel};
use crate::embedding::{EmbeddingSource, SpeakerEmbeddingSet};
use crate::error::{Error, Result};
use crate::features::VIDEO_FRAME_RATE;
use crate::io::save_rttm;
use crate::pipeline::{infer_sessions, log_embeddings, training_samples, RunConfig};
use crate::postproc::timeline_to_labels;
use crate::rng::Rng;
use crate::scoring::{score_files, DerReport};
use crate::synth::{Corpus, SynthSession};
use crate::timeline::Timeline;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub rounds: usize,
    /// Fusion-training epochs in each round.
    pub epochs: usize,
    /// Fraction of round-0 log frames flipped before refinement starts.
    pub corrupt: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            epochs: 3,
            corrupt: 0.0,
        }
    }
}

/// Per-session timelines produced by one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DiarizationLog {
    pub round: usize,
    pub timelines: BTreeMap<String, Timeline>,
}

impl DiarizationLog {
    pub fn new(round: usize, timelines: impl IntoIterator<Item = Timeline>) -> Self {
        Self {
            round,
            timelines: timelines.into_iter().map(|t| (t.file_id.clone(), t)).collect(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("round_{}.rttm", self.round)
    }
}

/// Mean identity-stream vector over each speaker's single-speaker frames in
/// `log`, unit-normalised. Speakers without such frames get the session's
/// mean identity vector and are flagged as fallbacks.
pub fn extract_speaker_embeddings(session: &SynthSession, log: &Timeline) -> SpeakerEmbeddingSet {
    let t = session.frames();
    let labels = timeline_to_labels(log, t, VIDEO_FRAME_RATE, &session.speakers);
    let d = session.identity.cols();
    let n = session.speakers.len();
    let mut sums = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    let mut global = vec![0.0; d];
    for r in 0..t {
        let row = session.identity.row(r);
        global.iter_mut().zip(row).for_each(|(g, v)| *g += v / t as f64);
        let active: Vec<usize> = (0..n).filter(|&c| labels.at(r, c) >= 0.5).collect();
        if let [c] = active[..] {
            sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
    }
    let fallback: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    let cols: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&fallback)
        .map(|(s, &fb)| if fb { global.clone() } else { s })
        .collect();
    let mut set = SpeakerEmbeddingSet::from_columns(&cols, EmbeddingSource::Log).expect("n ≥ 1, d ≥ 1");
    set.fallback = fallback;
    set
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub dev: DerReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub model: CasaModel,
    /// Logs for rounds `0..=R`.
    pub logs: Vec<DiarizationLog>,
    /// Dev-set DER of every log in `logs`.
    pub history: Vec<RoundReport>,
    pub loss_history: Vec<Vec<f64>>,
}

fn dev_report(corpus: &Corpus, dev: &[usize], log: &DiarizationLog, collar: f64) -> Result<DerReport> {
    let refs: BTreeMap<String, Timeline> = dev
        .iter()
        .map(|&i| (corpus.sessions[i].id.clone(), corpus.sessions[i].reference.clone()))
        .collect();
    let hyps: BTreeMap<String, Timeline> = dev
        .iter()
        .filter_map(|&i| log.timelines.get(&corpus.sessions[i].id).map(|t| (t.file_id.clone(), t.clone())))
        .collect();
    let reports = score_files(&refs, &hyps, collar)?;
    Ok(DerReport::sum("dev", &reports))
}

/// Runs `cfg.refine.rounds` rounds starting from `initial`. Each round
/// extracts embeddings and frame labels from the current log, continues
/// training `model`, and infers every session to produce the next log.
pub fn refine_loop(corpus: &Corpus, model: CasaModel, initial: DiarizationLog, cfg: &RunConfig) -> Result<RefineOutcome> {
    let (train, dev) = corpus.split();
    let all: Vec<usize> = (0..corpus.sessions.len()).collect();
    let mut rng = Rng::derive(cfg.seed, 0x5eed);
    let mut model = model;
    let mut history = vec![RoundReport {
        round: 0,
        dev: dev_report(corpus, &dev, &initial, 0.0)?,
    }];
    let mut logs = vec![initial];
    let mut losses = Vec::new();
    let training = crate::casa::CasaTrainConfig {
        epochs: cfg.refine.epochs,
        ..cfg.training
    };
    for round in 1..=cfg.refine.rounds {
        let current = logs.last().expect("round 0 present");
        let embeddings = log_embeddings(corpus, &current.timelines);
        let labels = |i: usize| {
            let s = &corpus.sessions[i];
            let empty = Timeline::new(&s.id);
            timeline_to_labels(
                current.timelines.get(&s.id).unwrap_or(&empty),
                s.frames(),
                VIDEO_FRAME_RATE,
                &s.speakers,
            )
        };
        let samples = training_samples(corpus, &train, &labels, &embeddings, cfg, &mut rng)?;
        let trained = train_casa(&samples, model, &training, &mut rng)?;
        model = trained.model;
        losses.push(trained.loss_history);
        let next = DiarizationLog::new(round, infer_sessions(&model, corpus, &all, &embeddings, &cfg.postproc)?);
        history.push(RoundReport {
            round,
            dev: dev_report(corpus, &dev, &next, 0.0)?,
        });
        logs.push(next);
    }
    Ok(RefineOutcome {
        model,
        logs,
        history,
        loss_history: losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub log: String,
    pub false_alarm: f64,
    pub missed: f64,
    pub speaker_error: f64,
    pub total: f64,
    pub der: f64,
}

pub const HISTORY_FILE: &str = "refine_history.json";

pub fn history_entries(outcome: &RefineOutcome) -> Vec<HistoryEntry> {
    outcome
        .history
        .iter()
        .zip(&outcome.logs)
        .map(|(h, log)| HistoryEntry {
            round: h.round,
            log: log.file_name(),
            false_alarm: h.dev.false_alarm,
            missed: h.dev.missed,
            speaker_error: h.dev.speaker_error,
            total: h.dev.total,
            der: h.dev.der(),
        })
        .collect()
}

/// Writes `round_<k>.rttm` for every round and the DER history.
pub fn write_refine_artifacts(dir: impl AsRef<Path>, outcome: &RefineOutcome) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for log in &outcome.logs {
        save_rttm(dir.join(log.file_name()), log.timelines.values())?;
    }
    let text = serde_json::to_string_pretty(&history_entries(outcome)).expect("history serialises");
    let path = dir.join(HISTORY_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}
