use std::collections::BTreeMap;

use casanet::casa::{train_casa, CasaModel, CasaTrainConfig};
use casanet::pipeline::{self, RunConfig};
use casanet::refine::{refine_loop, DiarizationLog, RefineConfig};
use casanet::scoring::{score_files, DerReport};
use casanet::synth::{generate, Corpus, SynthConfig};
use casanet::Rng;

fn config(sessions: usize, seconds: f64) -> RunConfig {
    let mut cfg = RunConfig {
        synth: SynthConfig {
            sessions,
            session_seconds: seconds,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    // the small corpora here give few optimiser steps per epoch
    cfg.training.epochs = 2;
    cfg.training.lr = 1e-3;
    cfg
}

fn dev_der(corpus: &Corpus, hyps: &[casanet::Timeline]) -> f64 {
    let hyp: BTreeMap<_, _> = hyps.iter().map(|t| (t.file_id.clone(), t.clone())).collect();
    let refs: BTreeMap<_, _> = corpus
        .references()
        .into_iter()
        .filter(|(k, _)| hyp.contains_key(k))
        .collect();
    DerReport::sum("dev", &score_files(&refs, &hyp, 0.0).unwrap()).der()
}

#[test]
fn vvad_learns_and_predicts_dev_frames() {
    let mut cfg = config(5, 30.0);
    cfg.vvad.epochs = 6;
    let corpus = generate(&cfg.synth).unwrap();
    let (train, dev) = corpus.split();
    let out = pipeline::train_vvad_stage(&corpus, &train, &cfg, &mut Rng::new(3)).unwrap();
    assert_eq!(out.loss_history.len(), 6);
    assert!(out.loss_history[5] < out.loss_history[0]);
    let (mut right, mut total) = (0usize, 0usize);
    for &i in &dev {
        let s = &corpus.sessions[i];
        let p = out.model.predict(&s.visual).unwrap();
        for (a, b) in p.data().iter().zip(s.labels.data()) {
            right += ((*a >= 0.5) == (*b == 1.0)) as usize;
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 0.9, "dev frame accuracy {acc}");
}

#[test]
fn fusion_training_leaves_vvad_frozen() {
    let cfg = config(3, 16.0);
    let corpus = generate(&cfg.synth).unwrap();
    let (train, _) = corpus.split();
    let mut rng = Rng::new(1);
    let vvad = pipeline::train_vvad_stage(&corpus, &train, &cfg, &mut rng).unwrap().model;
    let logs = pipeline::vvad_logs(&vvad, &corpus, &cfg.postproc).unwrap();
    let emb = pipeline::log_embeddings(&corpus, &logs);
    let model = CasaModel::with_vvad(cfg.model, vvad.clone(), &mut rng).unwrap();
    let samples =
        pipeline::training_samples(&corpus, &train, &|i| corpus.sessions[i].labels.clone(), &emb, &cfg, &mut rng)
            .unwrap();
    assert!(samples.iter().all(|s| s.speakers() == 4));
    let before = vvad.predict(&corpus.sessions[0].visual).unwrap();
    let cfg_train = CasaTrainConfig {
        epochs: 1,
        ..cfg.training
    };
    let trained = train_casa(&samples, model, &cfg_train, &mut rng).unwrap();
    assert_eq!(trained.model.vvad, vvad);
    assert_eq!(trained.model.vvad.predict(&corpus.sessions[0].visual).unwrap(), before);
}

#[test]
fn zero_rounds_is_a_no_op() {
    let mut cfg = config(3, 16.0);
    cfg.refine = RefineConfig {
        rounds: 0,
        ..RefineConfig::default()
    };
    let corpus = generate(&cfg.synth).unwrap();
    let model = pipeline::untrained_model(&corpus, &cfg).unwrap();
    let initial = DiarizationLog::new(0, corpus.sessions.iter().map(|s| s.reference.clone()));
    let out = refine_loop(&corpus, model.clone(), initial.clone(), &cfg).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.logs, vec![initial]);
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].dev.der(), 0.0);
}

fn refine_from_oracle(cfg: &RunConfig, corpus: &Corpus) -> Vec<f64> {
    let (train, _) = corpus.split();
    let mut rng = Rng::new(cfg.seed);
    let vvad = pipeline::train_vvad_stage(corpus, &train, cfg, &mut rng).unwrap().model;
    let mut model = CasaModel::with_vvad(cfg.model, vvad, &mut rng).unwrap();
    pipeline::fit_audio_norm(&mut model, corpus, &train).unwrap();
    let initial = DiarizationLog::new(0, corpus.sessions.iter().map(|s| s.reference.clone()));
    let out = refine_loop(corpus, model, initial, cfg).unwrap();
    for log in &out.logs {
        for tl in log.timelines.values() {
            assert!(tl.segments.iter().all(|s| s.duration > 0.0 && s.start >= 0.0));
        }
    }
    out.history.iter().map(|h| h.dev.der()).collect()
}

#[test]
fn refinement_is_stable_and_deterministic_from_oracle_labels() {
    let mut cfg = config(5, 40.0);
    cfg.refine.epochs = 2;
    let corpus = generate(&cfg.synth).unwrap();
    let first = refine_from_oracle(&cfg, &corpus);
    assert_eq!(first.len(), 3);
    assert_eq!(first[0], 0.0);
    assert!(first[2] <= first[1] + 0.01, "{first:?}");
    let second = refine_from_oracle(&cfg, &corpus);
    assert_eq!(
        first.iter().map(|d| d.to_bits()).collect::<Vec<_>>(),
        second.iter().map(|d| d.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn trained_model_beats_untrained_model() {
    let cfg = config(5, 40.0);
    let corpus = generate(&cfg.synth).unwrap();
    let (_, dev) = corpus.split();
    let trained = pipeline::train_model(&corpus, &cfg).unwrap();
    assert_eq!(trained.casa_loss.len(), 2);
    let good = dev_der(&corpus, &pipeline::infer_corpus(&trained.model, &corpus, &dev, &cfg.postproc).unwrap());
    let untrained = pipeline::untrained_model(&corpus, &cfg).unwrap();
    let bad = dev_der(&corpus, &pipeline::infer_corpus(&untrained, &corpus, &dev, &cfg.postproc).unwrap());
    assert!(good < 0.2 && bad > 0.4, "trained {good} untrained {bad}");
}
