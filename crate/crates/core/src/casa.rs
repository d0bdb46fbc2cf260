//! The CASA fusion network: audio/visual cross-attention in both directions,
//! self-attention over the concatenated streams, and a two-logit decoder.
//!
//! Every attention block runs over the time axis of one speaker channel at a
//! time, so the speaker axis behaves like a batch dimension.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, MultiHeadAttention};
use crate::augment::{mixup_batch, MixupParams, TrainingSample};
use crate::embedding::{EmbeddingBlock, EmbeddingKind, SpeakerEmbeddingSet};
use crate::encoders::{visual_encode, AudioCache, AudioEncoder, VvadModel};
use crate::error::{Error, Result};
use crate::features::MEL_BINS;
use crate::io::ByteReader;
use crate::layers::{relu, relu_backward, Linear};
use crate::loss::{bce_with_logits, sigmoid};
use crate::optim::{Adam, Parameter, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Cross-attention plus self-attention.
    Casa,
    /// Plain feature concatenation straight into the decoder.
    Concat,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casa" => Ok(Fusion::Casa),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::invalid(format!("unknown fusion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasaConfig {
    pub lip_dim: usize,
    pub fbank_dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub identity_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub frames: usize,
    pub max_speakers: usize,
    pub decoder_hidden: usize,
    pub fusion: Fusion,
    /// Adds each cross-attention input back onto its output.
    pub cross_residual: bool,
}

impl Default for CasaConfig {
    fn default() -> Self {
        Self {
            lip_dim: 32,
            fbank_dim: MEL_BINS,
            visual_dim: 64,
            audio_dim: 64,
            identity_dim: 32,
            d_model: 64,
            heads: 4,
            frames: 200,
            max_speakers: 4,
            decoder_hidden: 32,
            fusion: Fusion::Casa,
            cross_residual: true,
        }
    }
}

impl CasaConfig {
    pub fn fused_dim(&self) -> usize {
        self.visual_dim + self.audio_dim + self.identity_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.lip_dim,
            self.fbank_dim,
            self.visual_dim,
            self.audio_dim,
            self.identity_dim,
            self.d_model,
            self.heads,
            self.frames,
            self.max_speakers,
            self.decoder_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("all model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Two feed-forward layers mapping the fused width to two class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Linear,
    pub output: Linear,
}

impl Decoder {
    pub fn new(rng: &mut Rng, in_dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new("decoder.hidden", rng, in_dim, hidden, true),
            output: Linear::new("decoder.output", rng, hidden, 2, true),
        }
    }

    /// Returns `(hidden activations, T × 2 logits)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = relu(&self.hidden.forward(x)?);
        let z = self.output.forward(&h)?;
        Ok((h, z))
    }

    /// Speech-class logit margin `z_speech − z_silence` per frame.
    fn margin(z: &Tensor) -> Vec<f64> {
        (0..z.rows()).map(|t| z.at(t, 1) - z.at(t, 0)).collect()
    }

    fn backward(&mut self, x: &Tensor, h: &Tensor, dmargin: &[f64]) -> Result<Tensor> {
        let mut dz = Tensor::zeros(&[dmargin.len(), 2]);
        for (t, &g) in dmargin.iter().enumerate() {
            dz.set(t, 0, -g);
            dz.set(t, 1, g);
        }
        let dh = self.output.backward(h, &dz)?;
        let dh = relu_backward(h, &dh);
        self.hidden.backward(x, &dh)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.hidden.params();
        v.extend(self.output.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.hidden.params_mut();
        v.extend(self.output.params_mut());
        v
    }
}

/// Cross- and self-attention blocks; absent for the concatenation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// Visual queries against audio+speaker keys, output width `D_V`.
    pub audio_to_visual: MultiHeadAttention,
    /// Audio+speaker queries against visual keys, output width `D_A + D_I`.
    pub visual_to_audio: MultiHeadAttention,
    pub self_attention: MultiHeadAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasaModel {
    pub config: CasaConfig,
    /// Frozen after V-VAD training; its encoder produces `E_V`.
    pub vvad: VvadModel,
    pub audio: AudioEncoder,
    pub attention: Option<Attention>,
    pub decoder: Decoder,
}

/// Everything the network sees for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInput {
    /// Lip features, `T × F_lip × N`.
    pub visual: EmbeddingBlock,
    /// Pooled filterbank frames, `T × 40`.
    pub audio: Tensor,
    pub speakers: SpeakerEmbeddingSet,
}

impl BlockInput {
    pub fn frames(&self) -> usize {
        self.visual.frames()
    }

    pub fn speakers(&self) -> usize {
        self.visual.speakers()
    }

    fn check(&self, cfg: &CasaConfig) -> Result<()> {
        let (t, n) = (self.frames(), self.speakers());
        let ok = self.audio.rows() == t
            && self.audio.cols() == cfg.fbank_dim
            && self.visual.dim() == cfg.lip_dim
            && self.speakers.speakers() == n
            && self.speakers.dim() == cfg.identity_dim;
        if !ok {
            return Err(Error::Shape {
                op: "casa_forward",
                left: self.visual.data.shape().to_vec(),
                right: vec![self.audio.rows(), self.audio.cols(), self.speakers.dim(), self.speakers.speakers()],
            });
        }
        Ok(())
    }
}

enum ChannelCache {
    Casa {
        ca_av: AttentionCache,
        ca_va: AttentionCache,
        sa: AttentionCache,
        fused: Tensor,
        hidden: Tensor,
    },
    Concat {
        fused: Tensor,
        hidden: Tensor,
    },
}

pub struct BlockCache {
    audio: AudioCache,
    channels: Vec<ChannelCache>,
}

impl CasaModel {
    pub fn new(config: CasaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let vvad = VvadModel::new(rng, config.lip_dim, config.visual_dim);
        Self::with_vvad(config, vvad, rng)
    }

    /// Builds fresh fusion layers around an already trained V-VAD.
    pub fn with_vvad(config: CasaConfig, vvad: VvadModel, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if vvad.encoder.lip_dim() != config.lip_dim || vvad.encoder.visual_dim() != config.visual_dim {
            return Err(Error::invalid("V-VAD dimensions disagree with the model config"));
        }
        let audio = AudioEncoder::new(rng, config.fbank_dim, config.audio_dim);
        let stream_a = config.audio_dim + config.identity_dim;
        let fused = config.fused_dim();
        let attention = match config.fusion {
            Fusion::Casa => Some(Attention {
                audio_to_visual: MultiHeadAttention::new(
                    "ca_av",
                    rng,
                    config.visual_dim,
                    stream_a,
                    config.d_model,
                    config.heads,
                    config.visual_dim,
                )?,
                visual_to_audio: MultiHeadAttention::new(
                    "ca_va",
                    rng,
                    stream_a,
                    config.visual_dim,
                    config.d_model,
                    config.heads,
                    stream_a,
                )?,
                self_attention: MultiHeadAttention::new(
                    "sa",
                    rng,
                    fused,
                    fused,
                    config.d_model,
                    config.heads,
                    fused,
                )?,
            }),
            Fusion::Concat => None,
        };
        let decoder = Decoder::new(rng, fused, config.decoder_hidden);
        Ok(Self {
            config,
            vvad,
            audio,
            attention,
            decoder,
        })
    }

    /// Speech-logit margins (`T × N`) plus the values needed for backward.
    pub fn forward_block(&self, input: &BlockInput) -> Result<(Tensor, BlockCache)> {
        input.check(&self.config)?;
        let (t, n) = (input.frames(), input.speakers());
        let (e_a, audio_cache) = self.audio.forward(&input.audio)?;
        let e_v = visual_encode(&input.visual, &self.vvad.encoder)?;
        let mut margins = Tensor::zeros(&[t, n]);
        let mut channels = Vec::with_capacity(n);
        for c in 0..n {
            let f_v = e_v.channel(c);
            let ident = Tensor::new(
                vec![1, self.config.identity_dim],
                input.speakers.column(c),
            )?;
            let i_rep = repeat_row(&ident, t);
            let cache = match &self.attention {
                Some(att) => {
                    let f_a = Tensor::concat_cols(&[&e_a, &i_rep])?;
                    let (mut f_av, ca_av) = att.audio_to_visual.forward(&f_v, &f_a)?;
                    let (mut f_va, ca_va) = att.visual_to_audio.forward(&f_a, &f_v)?;
                    if self.config.cross_residual {
                        f_av.add_assign(&f_v)?;
                        f_va.add_assign(&f_a)?;
                    }
                    let x = Tensor::concat_cols(&[&f_av, &f_va])?;
                    let (mut fused, sa) = att.self_attention.forward(&x, &x)?;
                    fused.add_assign(&x)?;
                    let (hidden, z) = self.decoder.forward(&fused)?;
                    for (r, m) in Decoder::margin(&z).into_iter().enumerate() {
                        margins.set(r, c, m);
                    }
                    ChannelCache::Casa {
                        ca_av,
                        ca_va,
                        sa,
                        fused,
                        hidden,
                    }
                }
                None => {
                    let fused = Tensor::concat_cols(&[&e_a, &f_v, &i_rep])?;
                    let (hidden, z) = self.decoder.forward(&fused)?;
                    for (r, m) in Decoder::margin(&z).into_iter().enumerate() {
                        margins.set(r, c, m);
                    }
                    ChannelCache::Concat { fused, hidden }
                }
            };
            channels.push(cache);
        }
        Ok((
            margins,
            BlockCache {
                audio: audio_cache,
                channels,
            },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d margin` (`T × N`).
    pub fn backward_block(&mut self, cache: &BlockCache, dmargin: &Tensor) -> Result<()> {
        let cfg = self.config;
        let t = dmargin.rows();
        let mut de_a = Tensor::zeros(&[t, cfg.audio_dim]);
        for (c, ch) in cache.channels.iter().enumerate() {
            let g: Vec<f64> = (0..t).map(|r| dmargin.at(r, c)).collect();
            match ch {
                ChannelCache::Casa {
                    ca_av,
                    ca_va,
                    sa,
                    fused,
                    hidden,
                } => {
                    let att = self.attention.as_mut().expect("casa cache implies attention");
                    let dfused = self.decoder.backward(fused, hidden, &g)?;
                    let (dq, dkv) = att.self_attention.backward(sa, &dfused)?;
                    let mut dx = dfused;
                    dx.add_assign(&dq)?;
                    dx.add_assign(&dkv)?;
                    let df_av = dx.slice_cols(0, cfg.visual_dim)?;
                    let df_va = dx.slice_cols(cfg.visual_dim, cfg.audio_dim + cfg.identity_dim)?;
                    // the visual stream is frozen, so only the audio side is kept
                    let (_, mut df_a) = att.audio_to_visual.backward(ca_av, &df_av)?;
                    let (dq_va, _) = att.visual_to_audio.backward(ca_va, &df_va)?;
                    df_a.add_assign(&dq_va)?;
                    if cfg.cross_residual {
                        df_a.add_assign(&df_va)?;
                    }
                    de_a.add_assign(&df_a.slice_cols(0, cfg.audio_dim)?)?;
                }
                ChannelCache::Concat { fused, hidden } => {
                    let dfused = self.decoder.backward(fused, hidden, &g)?;
                    de_a.add_assign(&dfused.slice_cols(0, cfg.audio_dim)?)?;
                }
            }
        }
        self.audio.backward(&cache.audio, &de_a)?;
        Ok(())
    }

    /// Speech probabilities `S`, `T × N`.
    pub fn predict(&self, input: &BlockInput) -> Result<Tensor> {
        let (m, _) = self.forward_block(input)?;
        Ok(m.map(sigmoid))
    }

    /// Per-head attention weights of every block for speaker `c`, in the
    /// order a→v, v→a, self.
    pub fn attention_weights(&self, input: &BlockInput, c: usize) -> Result<Vec<Tensor>> {
        let (_, cache) = self.forward_block(input)?;
        Ok(match cache.channels.into_iter().nth(c) {
            Some(ChannelCache::Casa { ca_av, ca_va, sa, .. }) => ca_av
                .weights
                .into_iter()
                .chain(ca_va.weights)
                .chain(sa.weights)
                .collect(),
            Some(ChannelCache::Concat { .. }) => Vec::new(),
            None => return Err(Error::invalid(format!("no speaker channel {c}"))),
        })
    }

    /// Fits the audio standardiser on the pooled features of `blocks`.
    pub fn fit_audio_norm<'a>(&mut self, blocks: impl IntoIterator<Item = &'a Tensor>) {
        for b in blocks {
            self.audio.norm.observe(b);
        }
    }
}

impl Parameterized for CasaModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.audio.params();
        if let Some(att) = &self.attention {
            v.extend(att.audio_to_visual.params());
            v.extend(att.visual_to_audio.params());
            v.extend(att.self_attention.params());
        }
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.audio.params_mut();
        if let Some(att) = &mut self.attention {
            v.extend(att.audio_to_visual.params_mut());
            v.extend(att.visual_to_audio.params_mut());
            v.extend(att.self_attention.params_mut());
        }
        v.extend(self.decoder.params_mut());
        v
    }
}

fn repeat_row(row: &Tensor, t: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * row.len());
    for _ in 0..t {
        data.extend_from_slice(row.data());
    }
    Tensor::new(vec![t, row.len()], data).expect("non-empty")
}

fn check_pair(op: &'static str, a: &EmbeddingBlock, b: &EmbeddingBlock) -> Result<()> {
    if a.frames() != b.frames() || a.speakers() != b.speakers() {
        return Err(Error::Shape {
            op,
            left: a.data.shape().to_vec(),
            right: b.data.shape().to_vec(),
        });
    }
    Ok(())
}

/// `F_a`: audio embedding and speaker embedding concatenated per channel.
pub fn build_audio_stream(audio: &EmbeddingBlock, speaker: &EmbeddingBlock) -> Result<EmbeddingBlock> {
    check_pair("build_audio_stream", audio, speaker)?;
    let channels = (0..audio.speakers())
        .map(|c| Tensor::concat_cols(&[&audio.channel(c), &speaker.channel(c)]))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBlock::from_channels(&channels, audio.offset, audio.frame_rate, EmbeddingKind::Fused)
}

/// Attention from `query` onto `kv`, independently for each speaker channel.
pub fn cross_attend(
    query: &EmbeddingBlock,
    kv: &EmbeddingBlock,
    attn: &MultiHeadAttention,
) -> Result<EmbeddingBlock> {
    check_pair("cross_attend", query, kv)?;
    let channels = (0..query.speakers())
        .map(|c| attn.forward(&query.channel(c), &kv.channel(c)).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBlock::from_channels(&channels, query.offset, query.frame_rate, EmbeddingKind::Fused)
}

/// Self-attention over `concat(F_av, F_va)` with a residual connection.
pub fn self_attend(
    f_av: &EmbeddingBlock,
    f_va: &EmbeddingBlock,
    attn: &MultiHeadAttention,
) -> Result<EmbeddingBlock> {
    check_pair("self_attend", f_av, f_va)?;
    let channels = (0..f_av.speakers())
        .map(|c| {
            let x = Tensor::concat_cols(&[&f_av.channel(c), &f_va.channel(c)])?;
            let (mut y, _) = attn.forward(&x, &x)?;
            y.add_assign(&x)?;
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBlock::from_channels(&channels, f_av.offset, f_av.frame_rate, EmbeddingKind::Fused)
}

/// Speech probability per frame and speaker, `T × N`.
pub fn decode(fused: &EmbeddingBlock, decoder: &Decoder) -> Result<Tensor> {
    if fused.dim() != decoder.hidden.in_features() {
        return Err(Error::Shape {
            op: "decode",
            left: fused.data.shape().to_vec(),
            right: vec![decoder.hidden.in_features()],
        });
    }
    let (t, n) = (fused.frames(), fused.speakers());
    let mut s = Tensor::zeros(&[t, n]);
    for c in 0..n {
        let (_, z) = decoder.forward(&fused.channel(c))?;
        for (r, m) in Decoder::margin(&z).into_iter().enumerate() {
            s.set(r, c, sigmoid(m));
        }
    }
    Ok(s)
}

pub fn casa_forward(input: &BlockInput, model: &CasaModel) -> Result<Tensor> {
    model.predict(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Blocks per minibatch; a batch never spans two sessions.
    pub batch_blocks: usize,
    pub mixup: MixupParams,
}

impl Default for CasaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            batch_blocks: 4,
            mixup: MixupParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasaTraining {
    pub model: CasaModel,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Groups sample indices into per-session batches in a shuffled order.
fn session_batches(samples: &[TrainingSample], batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut sessions: Vec<usize> = samples.iter().map(|s| s.session).collect();
    sessions.sort_unstable();
    sessions.dedup();
    let mut batches = Vec::new();
    for s in sessions {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].session == s).collect();
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch.max(1)).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

/// One optimiser step on a batch; returns the batch loss.
pub fn train_step(model: &mut CasaModel, batch: &[TrainingSample], adam: &Adam) -> Result<f64> {
    model.zero_grad();
    let loss = batch_gradients(model, batch)?;
    adam.step_all(model)?;
    Ok(loss)
}

struct BatchPass {
    loss: f64,
    grad: Tensor,
    margins: Vec<Tensor>,
    caches: Vec<BlockCache>,
}

fn batch_pass(model: &CasaModel, batch: &[TrainingSample]) -> Result<BatchPass> {
    let n = batch.first().ok_or(Error::EmptyCorpus)?.input.speakers();
    let mut margins = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    let (mut logits, mut targets, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for s in batch {
        if s.speakers() != n {
            return Err(Error::invalid("batch mixes speaker counts"));
        }
        let (m, cache) = model.forward_block(&s.input)?;
        logits.extend_from_slice(m.data());
        targets.extend_from_slice(s.labels.data());
        mask.extend_from_slice(s.mask_tensor().data());
        margins.push(m);
        caches.push(cache);
    }
    let rows = logits.len() / n;
    let out = bce_with_logits(
        &Tensor::new(vec![rows, n], logits)?,
        &Tensor::new(vec![rows, n], targets)?,
        &Tensor::new(vec![rows, n], mask)?,
    )?;
    Ok(BatchPass {
        loss: out.loss,
        grad: out.grad,
        margins,
        caches,
    })
}

/// Mean BCE over every valid cell of the batch.
pub fn batch_loss(model: &CasaModel, batch: &[TrainingSample]) -> Result<f64> {
    Ok(batch_pass(model, batch)?.loss)
}

/// Like [`batch_loss`], also accumulating parameter gradients.
pub fn batch_gradients(model: &mut CasaModel, batch: &[TrainingSample]) -> Result<f64> {
    let pass = batch_pass(model, batch)?;
    let mut offset = 0;
    for (cache, m) in pass.caches.iter().zip(&pass.margins) {
        let len = m.len();
        let g = Tensor::new(m.shape().to_vec(), pass.grad.data()[offset..offset + len].to_vec())?;
        model.backward_block(cache, &g)?;
        offset += len;
    }
    Ok(pass.loss)
}

/// Trains the fusion path with Adam; the V-VAD encoder is never updated.
pub fn train_casa(
    samples: &[TrainingSample],
    mut model: CasaModel,
    cfg: &CasaTrainConfig,
    rng: &mut Rng,
) -> Result<CasaTraining> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = session_batches(samples, cfg.batch_blocks, rng);
        for idx in &batches {
            let batch: Vec<TrainingSample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let batch = mixup_batch(&batch, &cfg.mixup, rng)?;
            total += train_step(&mut model, &batch, &adam)?;
        }
        history.push(total / batches.len() as f64);
    }
    Ok(CasaTraining {
        model,
        loss_history: history,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CASA";
pub const CHECKPOINT_VERSION: u32 = 1;

impl CasaModel {
    fn config_words(&self) -> [u32; 12] {
        let c = &self.config;
        [
            c.lip_dim,
            c.fbank_dim,
            c.visual_dim,
            c.audio_dim,
            c.identity_dim,
            c.d_model,
            c.heads,
            c.frames,
            c.max_speakers,
            c.decoder_hidden,
            match c.fusion {
                Fusion::Casa => 0,
                Fusion::Concat => 1,
            },
            c.cross_residual as usize,
        ]
        .map(|v| v as u32)
    }

    /// Tensors in file order: V-VAD, standardiser buffers, then trainable
    /// parameters in declaration order.
    fn stored_tensors(&self) -> Vec<Tensor> {
        let norm = &self.audio.norm;
        let mut out: Vec<Tensor> = self.vvad.params().iter().map(|p| p.value.clone()).collect();
        out.push(Tensor::new(vec![norm.mean.len()], norm.mean.clone()).expect("dim > 0"));
        out.push(Tensor::new(vec![norm.m2.len()], norm.m2.clone()).expect("dim > 0"));
        out.push(Tensor::new(vec![1], vec![norm.count as f64]).expect("scalar"));
        out.extend(self.params().iter().map(|p| p.value.clone()));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for w in self.config_words() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        let tensors = self.stored_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic.try_into().expect("four bytes"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let mut w = [0usize; 12];
        for x in &mut w {
            *x = r.u32()? as usize;
        }
        let config = CasaConfig {
            lip_dim: w[0],
            fbank_dim: w[1],
            visual_dim: w[2],
            audio_dim: w[3],
            identity_dim: w[4],
            d_model: w[5],
            heads: w[6],
            frames: w[7],
            max_speakers: w[8],
            decoder_hidden: w[9],
            fusion: match w[10] {
                0 => Fusion::Casa,
                1 => Fusion::Concat,
                f => return Err(Error::invalid(format!("unknown fusion code {f} in checkpoint"))),
            },
            cross_residual: w[11] != 0,
        };
        let mut model = CasaModel::new(config, &mut Rng::new(0))?;
        let count = r.u32()? as usize;
        let expected = model.stored_tensors();
        if count != expected.len() {
            return Err(Error::PayloadSize {
                declared: count,
                actual: expected.len(),
            });
        }
        let mut tensors = Vec::with_capacity(count);
        for want in &expected {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != want.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    left: shape,
                    right: want.shape().to_vec(),
                });
            }
            let data = (0..want.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::PayloadSize {
                declared: bytes.len() - r.remaining(),
                actual: bytes.len(),
            });
        }
        let mut it = tensors.into_iter();
        for p in model.vvad.params_mut() {
            p.value = it.next().expect("count checked");
        }
        model.audio.norm.mean = it.next().expect("count checked").into_data();
        model.audio.norm.m2 = it.next().expect("count checked").into_data();
        model.audio.norm.count = it.next().expect("count checked").data()[0] as u64;
        for p in model.params_mut() {
            p.value = it.next().expect("count checked");
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
