//! End-to-end stages shared by the command-line tool and the tests: V-VAD
//! training, log generation, block assembly, fusion training and inference.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{negative_sample_pad, TrainingSample};
use crate::casa::{train_casa, BlockInput, CasaConfig, CasaModel, CasaTrainConfig, CasaTraining};
use crate::embedding::SpeakerEmbeddingSet;
use crate::encoders::{train_vvad, VvadModel, VvadTrainConfig, VvadTraining};
use crate::error::{Error, Result};
use crate::features::{plan_blocks, plan_blocks_with, pool_audio_to_video_rate, BLOCK_SECONDS, VIDEO_FRAME_RATE};
use crate::postproc::{postprocess, BlockPrediction, PostprocConfig};
use crate::refine::{extract_speaker_embeddings, RefineConfig};
use crate::rng::Rng;
use crate::synth::{Corpus, SynthConfig, SynthSession};
use crate::tensor::Tensor;
use crate::timeline::Timeline;

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation, shuffling, mixup and negative sampling.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: CasaConfig,
    pub vvad: VvadTrainConfig,
    pub training: CasaTrainConfig,
    /// Seconds between the starts of consecutive training blocks.
    pub train_stride: f64,
    pub negative_sampling: bool,
    pub refine: RefineConfig,
    pub postproc: PostprocConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth: SynthConfig::default(),
            model: CasaConfig::default(),
            vvad: VvadTrainConfig::default(),
            training: CasaTrainConfig::default(),
            train_stride: crate::features::BLOCK_STRIDE,
            negative_sampling: true,
            refine: RefineConfig::default(),
            postproc: PostprocConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        if self.model.lip_dim != self.synth.lip_dim || self.model.identity_dim != self.synth.identity_dim {
            return Err(Error::invalid("model lip/identity dims must match the synthetic corpus"));
        }
        if self.synth.speakers > self.model.max_speakers {
            return Err(Error::invalid("sessions have more speakers than max_speakers"));
        }
        if !(self.train_stride > 0.0 && self.train_stride <= BLOCK_SECONDS) {
            return Err(Error::invalid("train_stride must lie in (0, 8] seconds"));
        }
        Ok(())
    }
}

/// Audio pooled to the video frame rate, `T × 40`.
pub fn pooled_audio(s: &SynthSession) -> Result<Tensor> {
    pool_audio_to_video_rate(&s.audio)
}

/// The network inputs of every block of a session, with frame offsets.
pub fn session_blocks(
    s: &SynthSession,
    pooled: &Tensor,
    speakers: &SpeakerEmbeddingSet,
    stride: f64,
) -> Result<Vec<(usize, BlockInput)>> {
    let plan = if stride == crate::features::BLOCK_STRIDE {
        plan_blocks(s.duration())?
    } else {
        plan_blocks_with(s.duration(), BLOCK_SECONDS, stride)?
    };
    let len = (BLOCK_SECONDS * VIDEO_FRAME_RATE).round() as usize;
    plan.frame_offsets(VIDEO_FRAME_RATE)
        .into_iter()
        .map(|off| {
            let visual = s.visual.slice_frames(off, len)?;
            let audio = Tensor::new(
                vec![len, pooled.cols()],
                pooled.data()[off * pooled.cols()..(off + len) * pooled.cols()].to_vec(),
            )?;
            Ok((
                off,
                BlockInput {
                    visual,
                    audio,
                    speakers: speakers.clone(),
                },
            ))
        })
        .collect()
}

/// Trains the V-VAD on the ground-truth labels of the given sessions.
pub fn train_vvad_stage(corpus: &Corpus, sessions: &[usize], cfg: &RunConfig, rng: &mut Rng) -> Result<VvadTraining> {
    let data: Vec<_> = sessions
        .iter()
        .map(|&i| (&corpus.sessions[i].visual, &corpus.sessions[i].labels))
        .collect();
    let model = VvadModel::new(rng, cfg.model.lip_dim, cfg.model.visual_dim);
    train_vvad(&data, model, &cfg.vvad, rng)
}

fn frame_blocks(probs: Tensor) -> Vec<BlockPrediction> {
    vec![BlockPrediction {
        probs,
        offset: 0.0,
        frame_rate: VIDEO_FRAME_RATE,
    }]
}

/// V-VAD speech probabilities smoothed and binarised into a timeline.
pub fn vvad_log(model: &VvadModel, s: &SynthSession, post: &PostprocConfig) -> Result<Timeline> {
    let probs = model.predict(&s.visual)?;
    postprocess(&frame_blocks(probs), s.duration(), post, &s.speakers, &s.id)
}

pub fn vvad_logs(model: &VvadModel, corpus: &Corpus, post: &PostprocConfig) -> Result<BTreeMap<String, Timeline>> {
    corpus
        .sessions
        .par_iter()
        .map(|s| vvad_log(model, s, post).map(|t| (s.id.clone(), t)))
        .collect()
}

/// Speaker embeddings of every session, extracted from `logs`.
pub fn log_embeddings(corpus: &Corpus, logs: &BTreeMap<String, Timeline>) -> Vec<SpeakerEmbeddingSet> {
    corpus
        .sessions
        .iter()
        .map(|s| {
            let empty = Timeline::new(&s.id);
            extract_speaker_embeddings(s, logs.get(&s.id).unwrap_or(&empty))
        })
        .collect()
}

/// Training blocks for `sessions`, labelled by `labels(i)` and padded with
/// negative speakers when enabled.
pub fn training_samples(
    corpus: &Corpus,
    sessions: &[usize],
    labels: &dyn Fn(usize) -> Tensor,
    embeddings: &[SpeakerEmbeddingSet],
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainingSample>> {
    let protos = corpus.prototypes();
    let mut out = Vec::new();
    for &i in sessions {
        let s = &corpus.sessions[i];
        let pooled = pooled_audio(s)?;
        let lab = labels(i);
        let donors: Vec<Vec<f64>> = sessions
            .iter()
            .filter(|&&j| j != i)
            .flat_map(|&j| {
                let e = &embeddings[j];
                (0..e.speakers()).filter(|&n| !e.fallback[n]).map(|n| e.column(n)).collect::<Vec<_>>()
            })
            .collect();
        for (off, input) in session_blocks(s, &pooled, &embeddings[i], cfg.train_stride)? {
            let t = input.frames();
            let block_labels = Tensor::new(
                vec![t, lab.cols()],
                lab.data()[off * lab.cols()..(off + t) * lab.cols()].to_vec(),
            )?;
            let sample = TrainingSample {
                input,
                labels: block_labels,
                mask: vec![true; s.speakers.len()],
                session: i,
            };
            out.push(if cfg.negative_sampling {
                negative_sample_pad(&sample, cfg.model.max_speakers, &donors, &protos, rng)?
            } else {
                sample
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Fits the audio standardiser on the pooled audio of `sessions`.
pub fn fit_audio_norm(model: &mut CasaModel, corpus: &Corpus, sessions: &[usize]) -> Result<()> {
    for &i in sessions {
        let pooled = pooled_audio(&corpus.sessions[i])?;
        model.fit_audio_norm([&pooled]);
    }
    Ok(())
}

/// Blocks → overlap average → median filter → binarise → timeline.
pub fn infer_session(
    model: &CasaModel,
    s: &SynthSession,
    speakers: &SpeakerEmbeddingSet,
    post: &PostprocConfig,
) -> Result<Timeline> {
    let pooled = pooled_audio(s)?;
    let blocks = session_blocks(s, &pooled, speakers, crate::features::BLOCK_STRIDE)?
        .into_iter()
        .map(|(off, input)| {
            Ok(BlockPrediction {
                probs: model.predict(&input)?,
                offset: off as f64 / VIDEO_FRAME_RATE,
                frame_rate: VIDEO_FRAME_RATE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    postprocess(&blocks, s.duration(), post, &s.speakers, &s.id)
}

/// Infers the given sessions in parallel with embeddings taken from `logs`.
/// Output order follows `sessions`, whatever the thread count.
pub fn infer_sessions(
    model: &CasaModel,
    corpus: &Corpus,
    sessions: &[usize],
    embeddings: &[SpeakerEmbeddingSet],
    post: &PostprocConfig,
) -> Result<Vec<Timeline>> {
    sessions
        .par_iter()
        .map(|&i| infer_session(model, &corpus.sessions[i], &embeddings[i], post))
        .collect()
}

/// Standalone inference: V-VAD log → speaker embeddings → fusion network.
pub fn infer_corpus(model: &CasaModel, corpus: &Corpus, sessions: &[usize], post: &PostprocConfig) -> Result<Vec<Timeline>> {
    let logs = vvad_logs(&model.vvad, corpus, post)?;
    let embeddings = log_embeddings(corpus, &logs);
    infer_sessions(model, corpus, sessions, &embeddings, post)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: CasaModel,
    pub vvad_loss: Vec<f64>,
    pub casa_loss: Vec<f64>,
}

/// The two-stage protocol: train and freeze the V-VAD, derive speaker
/// embeddings from its log, then train the fusion network on ground truth.
pub fn train_model(corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, _) = corpus.split();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = Rng::new(cfg.seed);
    let vvad = train_vvad_stage(corpus, &train, cfg, &mut rng)?;
    let logs = vvad_logs(&vvad.model, corpus, &cfg.postproc)?;
    let embeddings = log_embeddings(corpus, &logs);
    let mut model = CasaModel::with_vvad(cfg.model, vvad.model, &mut rng)?;
    fit_audio_norm(&mut model, corpus, &train)?;
    let samples = training_samples(
        corpus,
        &train,
        &|i| corpus.sessions[i].labels.clone(),
        &embeddings,
        cfg,
        &mut rng,
    )?;
    let CasaTraining { model, loss_history } = train_casa(&samples, model, &cfg.training, &mut rng)?;
    Ok(TrainOutcome {
        model,
        vvad_loss: vvad.loss_history,
        casa_loss: loss_history,
    })
}

/// A fusion model with an untrained V-VAD and untrained fusion layers.
pub fn untrained_model(corpus: &Corpus, cfg: &RunConfig) -> Result<CasaModel> {
    cfg.validate()?;
    let (train, _) = corpus.split();
    let mut model = CasaModel::new(cfg.model, &mut Rng::new(cfg.seed))?;
    fit_audio_norm(&mut model, corpus, &train)?;
    Ok(model)
}

/// Oracle speaker embeddings: the generator's true centroids.
pub fn oracle_embeddings(s: &SynthSession) -> Result<SpeakerEmbeddingSet> {
    let cols: Vec<Vec<f64>> = (0..s.speakers.len()).map(|n| s.centroid(n)).collect();
    SpeakerEmbeddingSet::from_columns(&cols, crate::embedding::EmbeddingSource::Oracle)
}
