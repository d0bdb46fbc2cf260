//! Mixup interpolation and negative-sampling speaker padding.

use serde::{Deserialize, Serialize};

use crate::casa::BlockInput;
use crate::embedding::{normalized, EmbeddingBlock, SpeakerEmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupParams {
    /// Concentration of the symmetric Beta distribution λ is drawn from.
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            enabled: true,
        }
    }
}

/// One training block with its frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: BlockInput,
    /// `T × N`, hard before mixup and soft after.
    pub labels: Tensor,
    /// Channels that count towards the loss.
    pub mask: Vec<bool>,
    /// Session index, used to keep batches within one session.
    pub session: usize,
}

impl TrainingSample {
    pub fn speakers(&self) -> usize {
        self.input.speakers()
    }

    /// The channel mask broadcast to `T × N`.
    pub fn mask_tensor(&self) -> Tensor {
        let (t, n) = (self.labels.rows(), self.labels.cols());
        let mut m = Tensor::zeros(&[t, n]);
        for r in 0..t {
            for (c, &on) in self.mask.iter().enumerate() {
                if on {
                    m.set(r, c, 1.0);
                }
            }
        }
        m
    }
}

fn lerp(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mixup",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `λ·a + (1−λ)·b` on lip features, pooled audio, speaker embeddings and
/// labels. Mixed speaker embeddings are scaled back to unit length.
pub fn mixup(a: &TrainingSample, b: &TrainingSample, lambda: f64) -> Result<TrainingSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup weight {lambda} outside [0, 1]")));
    }
    if a.mask.len() != b.mask.len() {
        return Err(Error::invalid("mixup of samples with different speaker counts"));
    }
    let visual = lerp(&a.input.visual.data, &b.input.visual.data, lambda)?;
    let audio = lerp(&a.input.audio, &b.input.audio, lambda)?;
    let mixed = lerp(&a.input.speakers.vectors, &b.input.speakers.vectors, lambda)?;
    let (d, n) = (mixed.rows(), mixed.cols());
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|c| normalized(&(0..d).map(|r| mixed.at(r, c)).collect::<Vec<_>>()))
        .collect();
    let mut speakers = SpeakerEmbeddingSet::from_columns(&columns, a.input.speakers.source)?;
    speakers.fallback = a
        .input
        .speakers
        .fallback
        .iter()
        .zip(&b.input.speakers.fallback)
        .map(|(x, y)| *x || *y)
        .collect();
    Ok(TrainingSample {
        input: BlockInput {
            visual: EmbeddingBlock {
                data: visual,
                ..a.input.visual.clone()
            },
            audio,
            speakers,
        },
        labels: lerp(&a.labels, &b.labels, lambda)?,
        mask: a.mask.iter().zip(&b.mask).map(|(x, y)| *x && *y).collect(),
        session: a.session,
    })
}

/// Mixes each sample with a partner from a seeded permutation of the same
/// batch, one λ ~ Beta(α, α) per batch. Returns the batch unchanged when
/// mixup is disabled.
pub fn mixup_batch(batch: &[TrainingSample], params: &MixupParams, rng: &mut Rng) -> Result<Vec<TrainingSample>> {
    if !params.enabled || batch.len() < 2 {
        return Ok(batch.to_vec());
    }
    if params.alpha <= 0.0 {
        return Err(Error::invalid("mixup alpha must be positive"));
    }
    let lambda = rng.beta_symmetric(params.alpha);
    let partner = rng.permutation(batch.len());
    batch
        .iter()
        .zip(&partner)
        .map(|(s, &j)| mixup(s, &batch[j], lambda))
        .collect()
}

/// Source of lip features for a speaker who never talks.
pub trait IdleVisual {
    /// `frames × F_lip` features drawn from the non-speaking distribution.
    fn idle_visual(&self, frames: usize, rng: &mut Rng) -> Tensor;
}

/// Pads a sample to `max_speakers` channels. New channels get idle lip
/// features, an embedding drawn from `donors` (other sessions), all-zero
/// labels, and stay in the loss mask.
pub fn negative_sample_pad(
    sample: &TrainingSample,
    max_speakers: usize,
    donors: &[Vec<f64>],
    idle: &dyn IdleVisual,
    rng: &mut Rng,
) -> Result<TrainingSample> {
    let n = sample.speakers();
    if n > max_speakers {
        return Err(Error::invalid(format!(
            "session has {n} speakers, more than the maximum {max_speakers}"
        )));
    }
    if n == max_speakers {
        return Ok(sample.clone());
    }
    if donors.is_empty() {
        return Err(Error::invalid("no donor speaker embeddings for negative sampling"));
    }
    let t = sample.input.frames();
    let mut visual = sample.input.visual.channels();
    let mut columns = sample.input.speakers.columns();
    let mut fallback = sample.input.speakers.fallback.clone();
    for _ in n..max_speakers {
        visual.push(idle.idle_visual(t, rng));
        columns.push(donors[rng.below(donors.len())].clone());
        fallback.push(false);
    }
    let visual = EmbeddingBlock::from_channels(
        &visual,
        sample.input.visual.offset,
        sample.input.visual.frame_rate,
        sample.input.visual.kind,
    )?;
    let mut speakers = SpeakerEmbeddingSet::from_columns(&columns, sample.input.speakers.source)?;
    // keep the original columns bit-exact rather than renormalised
    for r in 0..speakers.dim() {
        for c in 0..n {
            speakers.vectors.set(r, c, sample.input.speakers.vectors.at(r, c));
        }
    }
    speakers.fallback = fallback;
    let mut labels = Tensor::zeros(&[t, max_speakers]);
    for r in 0..t {
        labels.row_mut(r)[..n].copy_from_slice(sample.labels.row(r));
    }
    let mut mask = sample.mask.clone();
    mask.resize(max_speakers, true);
    Ok(TrainingSample {
        input: BlockInput {
            visual,
            audio: sample.input.audio.clone(),
            speakers,
        },
        labels,
        mask,
        session: sample.session,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, EmbeddingKind, EmbeddingSource};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sample(seed: u64, t: usize, n: usize) -> TrainingSample {
        let mut rng = Rng::new(seed);
        let visual = Tensor::new(vec![t, 3, n], (0..t * 3 * n).map(|_| rng.normal()).collect()).unwrap();
        let cols: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let labels = Tensor::new(vec![t, n], (0..t * n).map(|_| rng.below(2) as f64).collect()).unwrap();
        TrainingSample {
            input: BlockInput {
                visual: EmbeddingBlock::new(visual, 0.0, 25.0, EmbeddingKind::Raw).unwrap(),
                audio: Tensor::new(vec![t, 2], (0..t * 2).map(|_| rng.normal()).collect()).unwrap(),
                speakers: SpeakerEmbeddingSet::from_columns(&cols, EmbeddingSource::Oracle).unwrap(),
            },
            labels,
            mask: vec![true; n],
            session: seed as usize,
        }
    }

    fn constant(v: f64, t: usize, n: usize) -> TrainingSample {
        let mut s = sample(0, t, n);
        s.input.visual.data.fill(v);
        s.input.audio.fill(v);
        s.input.speakers.vectors.fill(v);
        s.labels.fill(v);
        s
    }

    fn max_diff(a: &TrainingSample, b: &TrainingSample) -> f64 {
        [
            a.input.visual.data.max_abs_diff(&b.input.visual.data),
            a.input.audio.max_abs_diff(&b.input.audio),
            a.input.speakers.vectors.max_abs_diff(&b.input.speakers.vectors),
            a.labels.max_abs_diff(&b.labels),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    #[test]
    fn lambda_one_returns_first_sample() {
        let (a, b) = (sample(1, 5, 2), sample(2, 5, 2));
        let m = mixup(&a, &b, 1.0).unwrap();
        assert!(max_diff(&m, &a) < 1e-15);
    }

    #[test]
    fn midpoint_of_zeros_and_ones() {
        let m = mixup(&constant(0.0, 4, 2), &constant(1.0, 4, 2), 0.5).unwrap();
        assert!(m.input.visual.data.data().iter().all(|&v| v == 0.5));
        assert!(m.labels.data().iter().all(|&v| v == 0.5));
        assert!(m.input.audio.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn beta_half_has_mean_one_half() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.beta_symmetric(0.5)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn mixup_rejects_mismatched_shapes() {
        assert!(mixup(&sample(1, 5, 2), &sample(2, 6, 2), 0.3).is_err());
        assert!(mixup(&sample(1, 5, 2), &sample(2, 5, 3), 0.3).is_err());
    }

    #[test]
    fn disabled_mixup_is_identity() {
        let batch = vec![sample(1, 4, 2), sample(2, 4, 2)];
        let params = MixupParams {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(mixup_batch(&batch, &params, &mut Rng::new(0)).unwrap(), batch);
    }

    struct Zeros;

    impl IdleVisual for Zeros {
        fn idle_visual(&self, frames: usize, _rng: &mut Rng) -> Tensor {
            Tensor::full(&[frames, 3], -1.0)
        }
    }

    #[test]
    fn full_session_is_not_padded() {
        let s = sample(3, 6, 4);
        assert_eq!(negative_sample_pad(&s, 4, &[], &Zeros, &mut Rng::new(0)).unwrap(), s);
    }

    #[test]
    fn padding_adds_negative_channels() {
        let s = sample(4, 6, 2);
        let donors = vec![vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0, 0.0]];
        let p = negative_sample_pad(&s, 4, &donors, &Zeros, &mut Rng::new(9)).unwrap();
        assert_eq!(p.speakers(), 4);
        assert_eq!(p.mask, vec![true; 4]);
        for c in 0..2 {
            assert_eq!(p.input.visual.channel(c), s.input.visual.channel(c));
            assert_eq!(p.input.speakers.column(c), s.input.speakers.column(c));
        }
        for c in 2..4 {
            assert!((0..6).all(|t| p.labels.at(t, c) == 0.0));
            assert!(donors.contains(&p.input.speakers.column(c)));
            for own in s.input.speakers.columns() {
                assert!(cosine(&own, &p.input.speakers.column(c)) < 0.99);
            }
        }
        assert!(negative_sample_pad(&s, 4, &[], &Zeros, &mut Rng::new(0)).is_err());
        assert!(negative_sample_pad(&sample(5, 6, 5), 4, &donors, &Zeros, &mut Rng::new(0)).is_err());
    }

    proptest! {
        #[test]
        fn mixing_with_itself_is_a_fixed_point(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let s = sample(seed, 4, 2);
            let m = mixup(&s, &s, lambda).unwrap();
            prop_assert!(max_diff(&m, &s) < 1e-12);
        }

        #[test]
        fn endpoint_swap_commutes(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let (a, b) = (sample(seed, 4, 2), sample(seed + 1000, 4, 2));
            let left = mixup(&a, &b, lambda).unwrap();
            let right = mixup(&b, &a, 1.0 - lambda).unwrap();
            prop_assert!(max_diff(&left, &right) < 1e-12);
        }

        #[test]
        fn mixed_labels_stay_in_unit_interval(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let m = mixup(&sample(seed, 4, 2), &sample(seed + 7, 4, 2), lambda).unwrap();
            prop_assert!(m.labels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
