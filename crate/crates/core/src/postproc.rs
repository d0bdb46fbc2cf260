//! Block merging, median smoothing, thresholding and frame/segment conversion.
//!
//! The inference pipeline runs these in a fixed order:
//! [`overlap_average`] → [`median_filter_columns`] → [`binarize`] →
//! [`labels_to_timeline`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::timeline::Timeline;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrediction {
    /// `T × N` speech probabilities.
    pub probs: Tensor,
    /// Block start in seconds.
    pub offset: f64,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionPrediction {
    /// `T_session × N`.
    pub merged: Tensor,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    /// Odd median window in frames; 1 disables smoothing.
    pub median_window: usize,
    pub threshold: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            median_window: 11,
            threshold: 0.5,
        }
    }
}

pub fn session_frames(session_length: f64, frame_rate: f64) -> usize {
    (session_length * frame_rate - 1e-9).ceil() as usize
}

/// Per-frame arithmetic mean of every block covering that frame.
pub fn overlap_average(blocks: &[BlockPrediction], session_length: f64) -> Result<SessionPrediction> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::invalid("no blocks to merge"))?;
    let rate = first.frame_rate;
    let n = first.probs.cols();
    let total = session_frames(session_length, rate);
    let mut sum = vec![0.0; total * n];
    let mut count = vec![0u32; total];
    for b in blocks {
        if b.probs.cols() != n || b.frame_rate != rate {
            return Err(Error::Shape {
                op: "overlap_average",
                left: first.probs.shape().to_vec(),
                right: b.probs.shape().to_vec(),
            });
        }
        let start = (b.offset * rate).round() as usize;
        if start + b.probs.rows() > total {
            return Err(Error::invalid(format!(
                "block at {} s overruns the {session_length} s session",
                b.offset
            )));
        }
        for t in 0..b.probs.rows() {
            count[start + t] += 1;
            for (s, p) in sum[(start + t) * n..(start + t + 1) * n].iter_mut().zip(b.probs.row(t)) {
                *s += p;
            }
        }
    }
    if let Some(t) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("frame {t} is not covered by any block")));
    }
    for (t, &c) in count.iter().enumerate() {
        sum[t * n..(t + 1) * n].iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(SessionPrediction {
        merged: Tensor::new(vec![total, n], sum)?,
        frame_rate: rate,
    })
}

/// Sliding median with edge replication; output length equals input length.
pub fn median_filter(seq: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "median window must be odd and positive, got {window}"
        )));
    }
    let half = (window / 2) as isize;
    let last = seq.len() as isize - 1;
    let mut buf = vec![0.0; window];
    Ok((0..seq.len() as isize)
        .map(|i| {
            for (slot, k) in buf.iter_mut().zip(-half..=half) {
                *slot = seq[(i + k).clamp(0, last) as usize];
            }
            let (_, m, _) = buf.select_nth_unstable_by(half as usize, f64::total_cmp);
            *m
        })
        .collect())
}

/// Applies [`median_filter`] to every column of a `T × N` matrix.
pub fn median_filter_columns(x: &Tensor, window: usize) -> Result<Tensor> {
    let (t, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[t, n]);
    for c in 0..n {
        let col: Vec<f64> = (0..t).map(|r| x.at(r, c)).collect();
        for (r, v) in median_filter(&col, window)?.into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// `1` where the probability is at least `threshold`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

/// Maximal runs of active frames become segments `[first/rate, (last+1)/rate)`.
pub fn labels_to_timeline(
    labels: &Tensor,
    frame_rate: f64,
    speakers: &[String],
    file_id: &str,
) -> Result<Timeline> {
    if speakers.len() != labels.cols() {
        return Err(Error::Shape {
            op: "labels_to_timeline",
            left: labels.shape().to_vec(),
            right: vec![speakers.len()],
        });
    }
    let t = labels.rows();
    let mut tl = Timeline::new(file_id);
    for (c, spk) in speakers.iter().enumerate() {
        let mut run_start = None;
        for r in 0..=t {
            let active = r < t && labels.at(r, c) >= 0.5;
            match (active, run_start) {
                (true, None) => run_start = Some(r),
                (false, Some(s)) => {
                    tl.push(spk.clone(), s as f64 / frame_rate, (r - s) as f64 / frame_rate)?;
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    crate::timeline::sort_segments(&mut tl.segments);
    Ok(tl)
}

/// Rasterises a timeline: frame `t` is active when its centre
/// `(t + 0.5) / rate` falls inside one of the speaker's segments.
pub fn timeline_to_labels(
    timeline: &Timeline,
    frames: usize,
    frame_rate: f64,
    speakers: &[String],
) -> Tensor {
    let mut labels = Tensor::zeros(&[frames, speakers.len().max(1)]);
    if speakers.is_empty() {
        return labels;
    }
    for seg in &timeline.segments {
        let Some(c) = speakers.iter().position(|s| *s == seg.speaker) else {
            continue;
        };
        let first = ((seg.start * frame_rate - 0.5).ceil().max(0.0)) as usize;
        for r in first..frames {
            let centre = (r as f64 + 0.5) / frame_rate;
            if centre >= seg.end() {
                break;
            }
            if centre >= seg.start {
                labels.set(r, c, 1.0);
            }
        }
    }
    labels
}

/// Full post-processing chain from block outputs to a timeline.
pub fn postprocess(
    blocks: &[BlockPrediction],
    session_length: f64,
    cfg: &PostprocConfig,
    speakers: &[String],
    file_id: &str,
) -> Result<Timeline> {
    let merged = overlap_average(blocks, session_length)?;
    let smooth = median_filter_columns(&merged.merged, cfg.median_window)?;
    let labels = binarize(&smooth, cfg.threshold)?;
    labels_to_timeline(&labels, merged.frame_rate, speakers, file_id)
}
