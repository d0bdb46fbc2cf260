//! Visual and audio temporal encoders, embedding replication, the V-VAD
//! training stage, and the baseline concatenation fusion.

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBlock, EmbeddingKind, SpeakerEmbeddingSet};
use crate::error::{Error, Result};
use crate::layers::{relu, relu_backward, Conv1d, Linear};
use crate::loss::{bce_with_logits, sigmoid};
use crate::optim::{Adam, Parameter, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-frame feed-forward encoder `F_lip → D_V → D_V`, shared across speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub hidden: Linear,
    pub output: Linear,
}

pub struct VisualCache {
    input: Tensor,
    hidden: Tensor,
}

impl VisualEncoder {
    pub fn new(rng: &mut Rng, lip_dim: usize, visual_dim: usize) -> Self {
        Self {
            hidden: Linear::new("visual.hidden", rng, lip_dim, visual_dim, true),
            output: Linear::new("visual.output", rng, visual_dim, visual_dim, true),
        }
    }

    pub fn lip_dim(&self) -> usize {
        self.hidden.in_features()
    }

    pub fn visual_dim(&self) -> usize {
        self.output.out_features()
    }

    /// Encodes a `frames × F_lip` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, VisualCache)> {
        if x.cols() != self.lip_dim() {
            return Err(Error::Shape {
                op: "visual_encode",
                left: x.shape().to_vec(),
                right: vec![self.lip_dim(), self.visual_dim()],
            });
        }
        let hidden = relu(&self.hidden.forward(x)?);
        let out = self.output.forward(&hidden)?;
        Ok((
            out,
            VisualCache {
                input: x.clone(),
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &VisualCache, dy: &Tensor) -> Result<Tensor> {
        let dh = self.output.backward(&cache.hidden, dy)?;
        let dh = relu_backward(&cache.hidden, &dh);
        self.hidden.backward(&cache.input, &dh)
    }
}

impl Parameterized for VisualEncoder {
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

/// Runs the visual encoder over every speaker of a `T × F_lip × N` stream.
pub fn visual_encode(stream: &EmbeddingBlock, encoder: &VisualEncoder) -> Result<EmbeddingBlock> {
    let channels = stream
        .channels()
        .iter()
        .map(|c| encoder.forward(c).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBlock::from_channels(&channels, stream.offset, stream.frame_rate, EmbeddingKind::Visual)
}

/// Visual encoder plus a per-frame sigmoid speech head.
#[derive(Debug, Clone, PartialEq)]
pub struct VvadModel {
    pub encoder: VisualEncoder,
    pub head: Linear,
}

impl VvadModel {
    pub fn new(rng: &mut Rng, lip_dim: usize, visual_dim: usize) -> Self {
        Self {
            encoder: VisualEncoder::new(rng, lip_dim, visual_dim),
            head: Linear::new("vvad.head", rng, visual_dim, 1, true),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (e, _) = self.encoder.forward(x)?;
        self.head.forward(&e)
    }

    /// Speech probabilities, `T × N`, for a `T × F_lip × N` stream.
    pub fn predict(&self, stream: &EmbeddingBlock) -> Result<Tensor> {
        let (t, n) = (stream.frames(), stream.speakers());
        let mut out = Tensor::zeros(&[t, n]);
        for c in 0..n {
            let z = self.logits(&stream.channel(c))?;
            for r in 0..t {
                out.set(r, c, sigmoid(z.data()[r]));
            }
        }
        Ok(out)
    }
}

impl Parameterized for VvadModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VvadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_frames: usize,
}

impl Default for VvadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            batch_frames: 64,
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct VvadTraining {
    pub model: VvadModel,
    pub loss_history: Vec<f64>,
}

/// Trains the V-VAD on labelled visual streams (`T × F_lip × N` with `T × N`
/// labels) using frame-level BCE and Adam. The returned model is meant to be
/// frozen for the fusion stage.
pub fn train_vvad(
    corpus: &[(&EmbeddingBlock, &Tensor)],
    mut model: VvadModel,
    cfg: &VvadTrainConfig,
    rng: &mut Rng,
) -> Result<VvadTraining> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lip = model.encoder.lip_dim();
    let mut features: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (stream, labels) in corpus {
        if labels.shape() != [stream.frames(), stream.speakers()] || stream.dim() != lip {
            return Err(Error::Shape {
                op: "train_vvad",
                left: stream.data.shape().to_vec(),
                right: labels.shape().to_vec(),
            });
        }
        for c in 0..stream.speakers() {
            let ch = stream.channel(c);
            features.extend_from_slice(ch.data());
            targets.extend((0..stream.frames()).map(|t| labels.at(t, c)));
        }
    }
    let total = targets.len();
    let adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..total).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_frames.max(1)) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * lip);
            for &i in chunk {
                x.extend_from_slice(&features[i * lip..(i + 1) * lip]);
            }
            let x = Tensor::new(vec![b, lip], x)?;
            let y = Tensor::new(vec![b, 1], chunk.iter().map(|&i| targets[i]).collect())?;
            model.zero_grad();
            let (e, cache) = model.encoder.forward(&x)?;
            let z = model.head.forward(&e)?;
            let out = bce_with_logits(&z, &y, &Tensor::full(&[b, 1], 1.0))?;
            let de = model.head.backward(&e, &out.grad)?;
            model.encoder.backward(&cache, &de)?;
            adam.step_all(&mut model)?;
            epoch_loss += out.loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(VvadTraining {
        model,
        loss_history: history,
    })
}

/// Per-feature standardisation with statistics accumulated from observed
/// frames and then held fixed. Stands in for batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: u64,
}

impl Standardizer {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    /// Folds every row of `x` into the running mean and variance.
    pub fn observe(&mut self, x: &Tensor) {
        for r in 0..x.rows() {
            self.count += 1;
            let n = self.count as f64;
            for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x.row(r)) {
                let delta = v - *m;
                *m += delta / n;
                *s += delta * (v - *m);
            }
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|s| s / self.count as f64).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let var = self.variance();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + Self::EPS).sqrt()).collect();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((o, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&inv) {
                *o = (*o - m) * s;
            }
        }
        out
    }

    /// Scales an upstream gradient through [`Standardizer::apply`].
    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let var = self.variance();
        let mut out = dy.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(&var) {
                *o /= (v + Self::EPS).sqrt();
            }
        }
        out
    }
}

/// Two kernel-3 temporal convolutions with ReLU, then a projection to `D_A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub norm: Standardizer,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub proj: Linear,
}

pub struct AudioCache {
    cols1: Tensor,
    h1: Tensor,
    cols2: Tensor,
    h2: Tensor,
}

impl AudioEncoder {
    pub const KERNEL: usize = 3;

    pub fn new(rng: &mut Rng, in_dim: usize, audio_dim: usize) -> Self {
        Self {
            norm: Standardizer::new(in_dim),
            conv1: Conv1d::new("audio.conv1", rng, Self::KERNEL, in_dim, audio_dim),
            conv2: Conv1d::new("audio.conv2", rng, Self::KERNEL, audio_dim, audio_dim),
            proj: Linear::new("audio.proj", rng, audio_dim, audio_dim, true),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn audio_dim(&self) -> usize {
        self.proj.out_features()
    }

    /// `T × in_dim` pooled features → `T × D_A`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AudioCache)> {
        let xn = self.norm.apply(x);
        let (a1, cols1) = self.conv1.forward(&xn)?;
        let h1 = relu(&a1);
        let (a2, cols2) = self.conv2.forward(&h1)?;
        let h2 = relu(&a2);
        let out = self.proj.forward(&h2)?;
        Ok((out, AudioCache { cols1, h1, cols2, h2 }))
    }

    /// Returns the gradient with respect to the raw (unstandardised) input.
    pub fn backward(&mut self, cache: &AudioCache, dy: &Tensor) -> Result<Tensor> {
        let dh2 = self.proj.backward(&cache.h2, dy)?;
        let da2 = relu_backward(&cache.h2, &dh2);
        let dh1 = self.conv2.backward(&cache.cols2, &da2)?;
        let da1 = relu_backward(&cache.h1, &dh1);
        let dxn = self.conv1.backward(&cache.cols1, &da1)?;
        Ok(self.norm.backward(&dxn))
    }
}

impl Parameterized for AudioEncoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.conv1.linear.params();
        v.extend(self.conv2.linear.params());
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.conv1.linear.params_mut();
        v.extend(self.conv2.linear.params_mut());
        v.extend(self.proj.params_mut());
        v
    }
}

/// Copies a `T × D_A` audio embedding onto each of `n` speaker channels.
pub fn replicate_audio(e: &Tensor, n: usize) -> Result<EmbeddingBlock> {
    if n == 0 {
        return Err(Error::invalid("cannot replicate onto zero speakers"));
    }
    let channels = vec![e.clone(); n];
    EmbeddingBlock::from_channels(&channels, 0.0, crate::features::VIDEO_FRAME_RATE, EmbeddingKind::Audio)
}

/// Copies each speaker embedding onto all `t` frames.
pub fn replicate_speaker(s: &SpeakerEmbeddingSet, t: usize) -> Result<EmbeddingBlock> {
    if t == 0 {
        return Err(Error::invalid("cannot replicate onto zero frames"));
    }
    let (d, n) = (s.dim(), s.speakers());
    let mut data = Vec::with_capacity(t * d * n);
    for _ in 0..t {
        data.extend_from_slice(s.vectors.data());
    }
    EmbeddingBlock::new(
        Tensor::new(vec![t, d, n], data)?,
        0.0,
        crate::features::VIDEO_FRAME_RATE,
        EmbeddingKind::Speaker,
    )
}

/// Concatenates audio, visual and speaker embeddings along the feature axis,
/// in that order.
pub fn baseline_concat_fuse(
    audio: &EmbeddingBlock,
    visual: &EmbeddingBlock,
    speaker: &EmbeddingBlock,
) -> Result<EmbeddingBlock> {
    let (t, n) = (audio.frames(), audio.speakers());
    for b in [visual, speaker] {
        if b.frames() != t || b.speakers() != n {
            return Err(Error::Shape {
                op: "baseline_concat_fuse",
                left: audio.data.shape().to_vec(),
                right: b.data.shape().to_vec(),
            });
        }
    }
    let channels = (0..n)
        .map(|c| Tensor::concat_cols(&[&audio.channel(c), &visual.channel(c), &speaker.channel(c)]))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBlock::from_channels(&channels, audio.offset, audio.frame_rate, EmbeddingKind::Fused)
}
