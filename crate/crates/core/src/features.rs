//! Log mel filterbank extraction and block segmentation.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms at 16 kHz.
pub const FRAME_LENGTH: usize = 400;
/// 10 ms at 16 kHz.
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_BINS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;

pub const AUDIO_FRAME_RATE: f64 = 100.0;
pub const VIDEO_FRAME_RATE: f64 = 25.0;
/// Audio frames per video frame.
pub const POOL_FACTOR: usize = 4;

pub const BLOCK_SECONDS: f64 = 8.0;
pub const BLOCK_STRIDE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 || samples.is_empty() {
            return Err(Error::invalid("waveform needs samples and a positive rate"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit PCM WAV file at 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::invalid(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s) of {}-bit {:?}",
            path.as_ref().display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    /// `T_a × 40` log energies.
    pub frames: Tensor,
    pub frame_shift: f64,
    pub frame_length: f64,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK mel filters from 0 Hz to Nyquist, `MEL_BINS × (FFT_SIZE/2+1)`.
pub fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect();
    let bins = FFT_SIZE / 2 + 1;
    (0..MEL_BINS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / FFT_SIZE as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// 40-bin log mel filterbank at a 10 ms shift.
///
/// Produces `floor(samples / 160)` frames, so 8 s yields exactly 800. Frames
/// whose 25 ms window runs past the end read a mirror image of the signal tail.
pub fn fbank(w: &Waveform) -> Result<FbankMatrix> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "sample rate {} Hz is not supported (need {SAMPLE_RATE})",
            w.sample_rate
        )));
    }
    let n = w.samples.len();
    if n < FRAME_LENGTH {
        return Err(Error::invalid(format!(
            "waveform of {n} samples is shorter than one {FRAME_LENGTH}-sample frame"
        )));
    }
    let frames = n / FRAME_SHIFT;
    let needed = (frames - 1) * FRAME_SHIFT + FRAME_LENGTH;
    let mut signal = w.samples.clone();
    for i in 0..needed.saturating_sub(n) {
        signal.push(w.samples[n - 2 - i]);
    }

    let window: Vec<f64> = (0..FRAME_LENGTH)
        .map(|i| {
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (FRAME_LENGTH - 1) as f64).cos()
        })
        .collect();
    let filters = mel_filterbank(w.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut out = Vec::with_capacity(frames * MEL_BINS);
    for f in 0..frames {
        let start = f * FRAME_SHIFT;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < FRAME_LENGTH {
                Complex::new(signal[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &filters {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(FbankMatrix {
        frames: Tensor::new(vec![frames, MEL_BINS], out)?,
        frame_shift: FRAME_SHIFT as f64 / SAMPLE_RATE as f64,
        frame_length: FRAME_LENGTH as f64 / SAMPLE_RATE as f64,
    })
}

/// Start times of the analysis blocks covering a session.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub session_length: f64,
    pub block_length: f64,
    pub stride: f64,
    pub offsets: Vec<f64>,
}

impl BlockPlan {
    /// Offsets converted to frame indices at `rate` frames per second.
    pub fn frame_offsets(&self, rate: f64) -> Vec<usize> {
        self.offsets.iter().map(|o| (o * rate).round() as usize).collect()
    }
}

/// 8 s blocks every 4 s; a final block that would overrun the session is
/// pulled back so that it ends exactly at the session end.
pub fn plan_blocks(session_length: f64) -> Result<BlockPlan> {
    plan_blocks_with(session_length, BLOCK_SECONDS, BLOCK_STRIDE)
}

pub fn plan_blocks_with(session_length: f64, block_length: f64, stride: f64) -> Result<BlockPlan> {
    const EPS: f64 = 1e-9;
    if !(block_length > 0.0 && stride > 0.0 && stride <= block_length) {
        return Err(Error::invalid("block length and stride must satisfy 0 < stride <= length"));
    }
    if !(session_length + EPS >= block_length) {
        return Err(Error::invalid(format!(
            "session of {session_length} s is shorter than one {block_length} s block; \
             zero-pad it upstream"
        )));
    }
    let mut offsets = Vec::new();
    let mut k = 0usize;
    loop {
        let off = k as f64 * stride;
        if off + block_length > session_length + EPS {
            break;
        }
        offsets.push(off);
        k += 1;
    }
    let last = session_length - block_length;
    if offsets.last().map_or(true, |&o| o + block_length < session_length - EPS) {
        offsets.push(last);
    }
    Ok(BlockPlan {
        session_length,
        block_length,
        stride,
        offsets,
    })
}

/// Mean over non-overlapping groups of four rows (100 Hz → 25 Hz).
pub fn pool_audio_to_video_rate(x: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if t % POOL_FACTOR != 0 {
        return Err(Error::invalid(format!(
            "{t} audio frames are not divisible by {POOL_FACTOR}"
        )));
    }
    let mut out = vec![0.0; (t / POOL_FACTOR) * d];
    for (g, chunk) in out.chunks_mut(d).enumerate() {
        for r in 0..POOL_FACTOR {
            for (o, v) in chunk.iter_mut().zip(x.row(g * POOL_FACTOR + r)) {
                *o += v;
            }
        }
        chunk.iter_mut().for_each(|o| *o /= POOL_FACTOR as f64);
    }
    Tensor::new(vec![t / POOL_FACTOR, d], out)
}
