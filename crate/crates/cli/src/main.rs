use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use casanet::casa::{CasaModel, Fusion};
use casanet::features::{fbank, read_wav};
use casanet::io::{read_rttm, save_rttm, write_faeb};
use casanet::pipeline::{self, RunConfig};
use casanet::refine::{refine_loop, write_refine_artifacts, DiarizationLog};
use casanet::rng::Rng;
use casanet::scoring::{format_report, score_files};
use casanet::synth::{corrupt_log, generate, load_corpus, save_corpus, Corpus};
use casanet::{embedding::EmbeddingBlock, embedding::EmbeddingKind, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "casanet", version, about = "Audio-visual speaker diarization on synthetic conversations")]
struct Cli {
    /// Worker threads for per-session inference (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the V-VAD, freeze it, then train the fusion network.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_mixup: bool,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Overrides the fusion-training epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the V-VAD epoch count.
        #[arg(long)]
        vvad_epochs: Option<usize>,
    },
    /// Diarize corpus sessions with a trained model and write RTTM.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        median_window: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
    },
    /// Iterative pseudo-label refinement; writes one RTTM per round.
    Refine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of round-0 log frames to flip.
        #[arg(long)]
        corrupt: Option<f64>,
        /// Fusion-training epochs per round.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Diarization error rate of a hypothesis RTTM against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        collar: f64,
    },
    /// Log mel filterbank of a 16 kHz mono WAV file, written as FAEB.
    Fbank {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Casa,
    Concat,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Split {
    Train,
    Dev,
    All,
}

/// Bad input (exit 2) versus a failure while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Internal(e.into())
    }
}

trait InputContext<T> {
    fn input(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into().context(what())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).input(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).input(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

/// Config for work on an existing corpus: data settings come from the corpus.
fn corpus_config(path: Option<&Path>, corpus: &Corpus) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(path)?;
    cfg.synth = corpus.config;
    cfg.validate().input(|| "invalid configuration".into())?;
    Ok(cfg)
}

fn open_corpus(dir: &Path) -> Result<Corpus, Failure> {
    load_corpus(dir).input(|| format!("loading corpus {}", dir.display()))
}

fn sessions(corpus: &Corpus, split: Split) -> Vec<usize> {
    let (train, dev) = corpus.split();
    match split {
        Split::Train => train,
        Split::Dev => dev,
        Split::All => (0..corpus.sessions.len()).collect(),
    }
}

#[derive(Serialize)]
struct LossHistory<'a> {
    vvad: &'a [f64],
    casa: &'a [f64],
}

fn history_path(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".history.json");
    PathBuf::from(name)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate().input(|| "invalid configuration".into())?;
            let corpus = generate(&cfg.synth)?;
            save_corpus(&out, &corpus)?;
            println!("wrote {} sessions to {}", corpus.sessions.len(), out.display());
        }
        Command::Train {
            corpus,
            out,
            config,
            no_mixup,
            fusion,
            epochs,
            vvad_epochs,
        } => {
            let corpus = open_corpus(&corpus)?;
            let mut cfg = corpus_config(config.as_deref(), &corpus)?;
            if no_mixup {
                cfg.training.mixup.enabled = false;
            }
            if let Some(f) = fusion {
                cfg.model.fusion = match f {
                    FusionArg::Casa => Fusion::Casa,
                    FusionArg::Concat => Fusion::Concat,
                };
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(e) = vvad_epochs {
                cfg.vvad.epochs = e;
            }
            let trained = pipeline::train_model(&corpus, &cfg)?;
            trained.model.save(&out)?;
            let history = LossHistory {
                vvad: &trained.vvad_loss,
                casa: &trained.casa_loss,
            };
            let path = history_path(&out);
            std::fs::write(&path, serde_json::to_string_pretty(&history)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            for (i, l) in trained.casa_loss.iter().enumerate() {
                println!("epoch {i:>3}  loss {l:.6}");
            }
            println!("wrote {}", out.display());
        }
        Command::Infer {
            model,
            corpus,
            out,
            config,
            median_window,
            threshold,
            split,
        } => {
            let model = CasaModel::load(&model).input(|| format!("loading model {}", model.display()))?;
            let corpus = open_corpus(&corpus)?;
            let mut cfg = corpus_config(config.as_deref(), &corpus)?;
            if let Some(w) = median_window {
                cfg.postproc.median_window = w;
            }
            if let Some(p) = threshold {
                cfg.postproc.threshold = p;
            }
            let hyps = pipeline::infer_corpus(&model, &corpus, &sessions(&corpus, split), &cfg.postproc)
                .input(|| "inference settings".into())?;
            save_rttm(&out, &hyps)?;
            println!("wrote {} sessions to {}", hyps.len(), out.display());
        }
        Command::Refine {
            corpus,
            rounds,
            out,
            config,
            corrupt,
            epochs,
        } => {
            let corpus = open_corpus(&corpus)?;
            let mut cfg = corpus_config(config.as_deref(), &corpus)?;
            if let Some(r) = rounds {
                cfg.refine.rounds = r;
            }
            if let Some(c) = corrupt {
                cfg.refine.corrupt = c;
            }
            if let Some(e) = epochs {
                cfg.refine.epochs = e;
            }
            if !(0.0..=1.0).contains(&cfg.refine.corrupt) {
                return Err(Failure::Usage(anyhow!("--corrupt must lie in [0, 1]")));
            }
            let (train, _) = corpus.split();
            let mut rng = Rng::new(cfg.seed);
            let vvad = pipeline::train_vvad_stage(&corpus, &train, &cfg, &mut rng)?;
            let logs = pipeline::vvad_logs(&vvad.model, &corpus, &cfg.postproc)?;
            let mut flip = Rng::derive(cfg.seed, 0xc0);
            let initial = corpus
                .sessions
                .iter()
                .map(|s| corrupt_log(&logs[&s.id], s.frames(), &s.speakers, cfg.refine.corrupt, &mut flip))
                .collect::<Result<Vec<_>, _>>()?;
            let mut model = CasaModel::with_vvad(cfg.model, vvad.model, &mut rng)?;
            pipeline::fit_audio_norm(&mut model, &corpus, &train)?;
            let outcome = refine_loop(&corpus, model, DiarizationLog::new(0, initial), &cfg)?;
            write_refine_artifacts(&out, &outcome)?;
            outcome.model.save(out.join("model.casa"))?;
            for h in &outcome.history {
                println!("round {}  dev DER {:6.2}%", h.round, 100.0 * h.dev.der());
            }
        }
        Command::Score { reference, hyp, collar } => {
            let refs = read_rttm(&reference).input(|| format!("reading {}", reference.display()))?;
            let hyps = read_rttm(&hyp).input(|| format!("reading {}", hyp.display()))?;
            if !(collar >= 0.0) {
                return Err(Failure::Usage(anyhow!("--collar must be non-negative")));
            }
            let reports = score_files(&refs, &hyps, collar)?;
            print!("{}", format_report(&reports));
        }
        Command::Fbank { wav, out } => {
            let w = read_wav(&wav).input(|| format!("reading {}", wav.display()))?;
            let f = fbank(&w).input(|| format!("computing filterbank of {}", wav.display()))?;
            let (t, d) = (f.frames.rows(), f.frames.cols());
            let block = EmbeddingBlock::new(
                Tensor::new(vec![t, d, 1], f.frames.into_data())?,
                0.0,
                f.frame_shift.recip(),
                EmbeddingKind::Raw,
            )?;
            write_faeb(&out, &block)?;
            println!("wrote {t} frames to {}", out.display());
        }
    }
    Ok(())
}
