//! Seeded synthetic conversations: Markov turn-taking per speaker, lip
//! features drawn from speaking/idle prototypes, filterbank-like audio built
//! from per-speaker spectral prototypes, and a noisy speaker-identity stream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::IdleVisual;
use crate::embedding::{EmbeddingBlock, EmbeddingKind};
use crate::error::{Error, Result};
use crate::features::{MEL_BINS, POOL_FACTOR, VIDEO_FRAME_RATE};
use crate::io::{read_faeb, read_rttm, save_rttm, write_faeb};
use crate::postproc::{labels_to_timeline, timeline_to_labels};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::timeline::Timeline;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sessions: usize,
    pub session_seconds: f64,
    pub speakers: usize,
    pub frame_rate: f64,
    /// Probability a speaking frame is followed by another speaking frame.
    pub p_ss: f64,
    /// Probability a silent frame is followed by another silent frame.
    pub p_qq: f64,
    pub visual_snr_db: f64,
    pub audio_snr_db: f64,
    /// Standard deviation of the per-dimension noise on the identity stream.
    pub identity_noise: f64,
    pub lip_dim: usize,
    pub identity_dim: usize,
    /// Fraction of sessions assigned to the training split.
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sessions: 10,
            session_seconds: 60.0,
            speakers: 3,
            frame_rate: VIDEO_FRAME_RATE,
            p_ss: 0.95,
            p_qq: 0.97,
            visual_snr_db: -6.0,
            audio_snr_db: 0.0,
            identity_noise: 0.2,
            lip_dim: 32,
            identity_dim: 32,
            train_ratio: 0.8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_ss", self.p_ss), ("p_qq", self.p_qq)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{name} = {p} is not in (0, 1)")));
            }
        }
        if self.sessions == 0 || self.speakers == 0 || self.lip_dim == 0 {
            return Err(Error::invalid("sessions, speakers and lip_dim must be positive"));
        }
        if self.speakers > self.identity_dim {
            return Err(Error::invalid("more speakers than identity dimensions"));
        }
        if self.frame_rate != VIDEO_FRAME_RATE {
            return Err(Error::invalid(format!("frame rate must be {VIDEO_FRAME_RATE} Hz")));
        }
        if !(self.session_seconds >= crate::features::BLOCK_SECONDS) {
            return Err(Error::invalid("sessions must last at least one block"));
        }
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::invalid("train_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.session_seconds * self.frame_rate).round() as usize
    }

    /// Long-run fraction of frames a speaker spends talking.
    pub fn stationary_speaking(&self) -> f64 {
        (1.0 - self.p_qq) / ((1.0 - self.p_ss) + (1.0 - self.p_qq))
    }

    pub fn visual_sigma(&self) -> f64 {
        10f64.powf(-self.visual_snr_db / 20.0)
    }

    pub fn audio_sigma(&self) -> f64 {
        10f64.powf(-self.audio_snr_db / 20.0)
    }
}

/// Corpus-wide prototypes shared by every session.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub speaking: Vec<f64>,
    pub idle: Vec<f64>,
    /// `MEL_BINS × D_I` map from speaker centroid to spectral shape.
    pub spectral: Tensor,
    pub visual_sigma: f64,
}

impl Prototypes {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = Rng::derive(cfg.seed, 0);
        let mut unit_rms = |len: usize| {
            let v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
            v.into_iter().map(|x| x / rms).collect::<Vec<_>>()
        };
        let speaking = unit_rms(cfg.lip_dim);
        let idle = unit_rms(cfg.lip_dim);
        let spectral = Tensor::new(vec![MEL_BINS, cfg.identity_dim], unit_rms(MEL_BINS * cfg.identity_dim))
            .expect("positive dims");
        Self {
            speaking,
            idle,
            spectral,
            visual_sigma: cfg.visual_sigma(),
        }
    }

    pub fn visual_frame(&self, speaking: bool, rng: &mut Rng) -> Vec<f64> {
        let proto = if speaking { &self.speaking } else { &self.idle };
        proto.iter().map(|p| p + self.visual_sigma * rng.normal()).collect()
    }

    /// Spectral prototype of a speaker with identity centroid `c`.
    pub fn spectrum(&self, c: &[f64]) -> Vec<f64> {
        (0..MEL_BINS)
            .map(|b| 1.0 + self.spectral.row(b).iter().zip(c).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }
}

impl IdleVisual for Prototypes {
    fn idle_visual(&self, frames: usize, rng: &mut Rng) -> Tensor {
        let data = (0..frames).flat_map(|_| self.visual_frame(false, rng)).collect();
        Tensor::new(vec![frames, self.idle.len()], data).expect("positive dims")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub id: String,
    pub speakers: Vec<String>,
    /// `T × N` ground truth at 25 Hz.
    pub labels: Tensor,
    /// `T × F_lip × N`.
    pub visual: EmbeddingBlock,
    /// `4T × 40` at 100 Hz.
    pub audio: Tensor,
    /// `T × D_I`.
    pub identity: Tensor,
    /// True speaker centroids as the columns of a `D_I × N` matrix.
    pub centroids: Tensor,
    pub reference: Timeline,
}

impl SynthSession {
    pub fn frames(&self) -> usize {
        self.labels.rows()
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / VIDEO_FRAME_RATE
    }

    pub fn centroid(&self, n: usize) -> Vec<f64> {
        (0..self.centroids.rows()).map(|d| self.centroids.at(d, n)).collect()
    }
}

pub fn session_id(index: usize) -> String {
    format!("sess{index:03}")
}

pub fn speaker_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("spk{i}")).collect()
}

/// Two-state chain started from its stationary distribution.
pub fn markov_labels(frames: usize, p_ss: f64, p_qq: f64, rng: &mut Rng) -> Vec<bool> {
    let stationary = (1.0 - p_qq) / ((1.0 - p_ss) + (1.0 - p_qq));
    let mut state = rng.uniform() < stationary;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(state);
        let stay = if state { p_ss } else { p_qq };
        if rng.uniform() >= stay {
            state = !state;
        }
    }
    out
}

/// Orthonormal random centroids via Gram-Schmidt.
fn centroids(dim: usize, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

pub fn generate_session(cfg: &SynthConfig, protos: &Prototypes, index: usize) -> Result<SynthSession> {
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.seed, index as u64 + 1);
    let (t, n, f, di) = (cfg.frames(), cfg.speakers, cfg.lip_dim, cfg.identity_dim);
    let chains: Vec<Vec<bool>> = (0..n).map(|_| markov_labels(t, cfg.p_ss, cfg.p_qq, &mut rng)).collect();
    let cents = centroids(di, n, &mut rng);

    let mut labels = Tensor::zeros(&[t, n]);
    let mut visual = vec![0.0; t * f * n];
    for (c, chain) in chains.iter().enumerate() {
        for (r, &on) in chain.iter().enumerate() {
            labels.set(r, c, on as u8 as f64);
            for (d, v) in protos.visual_frame(on, &mut rng).into_iter().enumerate() {
                visual[(r * f + d) * n + c] = v;
            }
        }
    }

    let spectra: Vec<Vec<f64>> = cents.iter().map(|c| protos.spectrum(c)).collect();
    let sigma_a = cfg.audio_sigma();
    let mut audio = Tensor::zeros(&[t * POOL_FACTOR, MEL_BINS]);
    for k in 0..t * POOL_FACTOR {
        let r = k / POOL_FACTOR;
        let row = audio.row_mut(k);
        for (c, spec) in spectra.iter().enumerate() {
            if chains[c][r] {
                row.iter_mut().zip(spec).for_each(|(o, s)| *o += s);
            }
        }
        row.iter_mut().for_each(|o| *o += sigma_a * rng.normal());
    }

    let mut identity = Tensor::zeros(&[t, di]);
    for r in 0..t {
        let active: Vec<usize> = (0..n).filter(|&c| chains[c][r]).collect();
        let row = identity.row_mut(r);
        for &c in &active {
            row.iter_mut()
                .zip(&cents[c])
                .for_each(|(o, x)| *o += x / active.len() as f64);
        }
        row.iter_mut().for_each(|o| *o += cfg.identity_noise * rng.normal());
    }

    let mut cmat = Tensor::zeros(&[di, n]);
    for (c, v) in cents.iter().enumerate() {
        for (d, &x) in v.iter().enumerate() {
            cmat.set(d, c, x);
        }
    }
    let id = session_id(index);
    let speakers = speaker_names(n);
    let reference = labels_to_timeline(&labels, cfg.frame_rate, &speakers, &id)?;
    Ok(SynthSession {
        id,
        speakers,
        labels,
        visual: EmbeddingBlock::new(Tensor::new(vec![t, f, n], visual)?, 0.0, cfg.frame_rate, EmbeddingKind::Raw)?,
        audio,
        identity,
        centroids: cmat,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub sessions: Vec<SynthSession>,
}

impl Corpus {
    pub fn prototypes(&self) -> Prototypes {
        Prototypes::new(&self.config)
    }

    /// `(train, dev)` session indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        train_dev_split(self.sessions.len(), self.config.train_ratio)
    }

    pub fn references(&self) -> BTreeMap<String, Timeline> {
        self.sessions.iter().map(|s| (s.id.clone(), s.reference.clone())).collect()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    let sessions = (0..cfg.sessions)
        .map(|i| generate_session(cfg, &protos, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: *cfg,
        sessions,
    })
}

/// The first `round(ratio · n)` sessions train, the rest are dev.
pub fn train_dev_split(n: usize, ratio: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    ((0..cut).collect(), (cut..n).collect())
}

/// Flips exactly `round(fraction · T · N)` frame labels chosen uniformly
/// without replacement, then converts back to segments.
pub fn corrupt_log(
    timeline: &Timeline,
    frames: usize,
    speakers: &[String],
    fraction: f64,
    rng: &mut Rng,
) -> Result<Timeline> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let mut labels = timeline_to_labels(timeline, frames, VIDEO_FRAME_RATE, speakers);
    let cells = labels.len();
    let flips = (fraction * cells as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    for i in 0..flips {
        let j = i + rng.below(cells - i);
        order.swap(i, j);
        let v = &mut labels.data_mut()[order[i]];
        *v = 1.0 - *v;
    }
    labels_to_timeline(&labels, VIDEO_FRAME_RATE, speakers, &timeline.file_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: SynthConfig,
    sessions: Vec<ManifestSession>,
    train: Vec<String>,
    dev: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSession {
    id: String,
    speakers: Vec<String>,
    frames: usize,
}

pub const MANIFEST: &str = "corpus.json";
pub const REFERENCE: &str = "ref.rttm";

fn matrix_block(m: &Tensor) -> Result<EmbeddingBlock> {
    EmbeddingBlock::new(m.clone().reshape(vec![m.rows(), m.cols(), 1])?, 0.0, VIDEO_FRAME_RATE, EmbeddingKind::Raw)
}

fn block_matrix(b: EmbeddingBlock) -> Result<Tensor> {
    let (t, d) = (b.frames(), b.dim());
    if b.speakers() != 1 {
        return Err(Error::invalid("expected a single-channel block"));
    }
    b.data.reshape(vec![t, d])
}

/// Writes the corpus as a directory of FAEB streams, RTTM references and a
/// JSON manifest.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &corpus.sessions {
        write_faeb(dir.join(format!("{}.visual.faeb", s.id)), &s.visual)?;
        write_faeb(dir.join(format!("{}.audio.faeb", s.id)), &matrix_block(&s.audio)?)?;
        write_faeb(dir.join(format!("{}.identity.faeb", s.id)), &matrix_block(&s.identity)?)?;
        let cents = EmbeddingBlock::new(
            s.centroids.clone().reshape(vec![1, s.centroids.rows(), s.centroids.cols()])?,
            0.0,
            VIDEO_FRAME_RATE,
            EmbeddingKind::Speaker,
        )?;
        write_faeb(dir.join(format!("{}.centroids.faeb", s.id)), &cents)?;
    }
    let (train, dev) = corpus.split();
    let name = |i: &usize| corpus.sessions[*i].id.clone();
    save_rttm(dir.join(REFERENCE), corpus.sessions.iter().map(|s| &s.reference))?;
    save_rttm(dir.join("ref_train.rttm"), train.iter().map(|&i| &corpus.sessions[i].reference))?;
    save_rttm(dir.join("ref_dev.rttm"), dev.iter().map(|&i| &corpus.sessions[i].reference))?;
    let manifest = Manifest {
        config: corpus.config,
        sessions: corpus
            .sessions
            .iter()
            .map(|s| ManifestSession {
                id: s.id.clone(),
                speakers: s.speakers.clone(),
                frames: s.frames(),
            })
            .collect(),
        train: train.iter().map(name).collect(),
        dev: dev.iter().map(name).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let refs = read_rttm(dir.join(REFERENCE))?;
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for m in &manifest.sessions {
        let reference = refs.get(&m.id).cloned().unwrap_or_else(|| Timeline::new(&m.id));
        let labels = timeline_to_labels(&reference, m.frames, VIDEO_FRAME_RATE, &m.speakers);
        let visual = read_faeb(dir.join(format!("{}.visual.faeb", m.id)))?;
        let audio = block_matrix(read_faeb(dir.join(format!("{}.audio.faeb", m.id)))?)?;
        let identity = block_matrix(read_faeb(dir.join(format!("{}.identity.faeb", m.id)))?)?;
        let cents = read_faeb(dir.join(format!("{}.centroids.faeb", m.id)))?;
        let (di, n) = (cents.dim(), cents.speakers());
        let centroids = cents.data.reshape(vec![di, n])?;
        if visual.frames() != m.frames || audio.rows() != m.frames * POOL_FACTOR || identity.rows() != m.frames {
            return Err(Error::invalid(format!("stream lengths of {} disagree with the manifest", m.id)));
        }
        sessions.push(SynthSession {
            id: m.id.clone(),
            speakers: m.speakers.clone(),
            labels,
            visual: EmbeddingBlock {
                kind: EmbeddingKind::Raw,
                ..visual
            },
            audio,
            identity,
            centroids,
            reference,
        });
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        config: manifest.config,
        sessions,
    })
}
