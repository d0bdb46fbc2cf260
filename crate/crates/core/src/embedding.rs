//! Frame-aligned embedding tensors shared by the encoders, fusion and FAEB I/O.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Visual,
    Audio,
    Speaker,
    Fused,
    /// Features loaded from disk without a declared role.
    Raw,
}

/// A `T × D × N` tensor (frames × features × speakers) with its block offset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub data: Tensor,
    pub offset: f64,
    pub frame_rate: f64,
    pub kind: EmbeddingKind,
}

impl EmbeddingBlock {
    pub fn new(data: Tensor, offset: f64, frame_rate: f64, kind: EmbeddingKind) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "embedding block must be T×D×N, got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            data,
            offset,
            frame_rate,
            kind,
        })
    }

    /// Stacks per-speaker `T × D` matrices along the speaker axis.
    pub fn from_channels(
        channels: &[Tensor],
        offset: f64,
        frame_rate: f64,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("no speaker channels"))?;
        let (t, d, n) = (first.rows(), first.cols(), channels.len());
        let mut data = vec![0.0; t * d * n];
        for (c, ch) in channels.iter().enumerate() {
            if ch.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "EmbeddingBlock::from_channels",
                    left: first.shape().to_vec(),
                    right: ch.shape().to_vec(),
                });
            }
            for ti in 0..t {
                for (di, &v) in ch.row(ti).iter().enumerate() {
                    data[(ti * d + di) * n + c] = v;
                }
            }
        }
        Self::new(Tensor::new(vec![t, d, n], data)?, offset, frame_rate, kind)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn speakers(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn get(&self, t: usize, d: usize, n: usize) -> f64 {
        self.data.data()[(t * self.dim() + d) * self.speakers() + n]
    }

    /// The `T × D` slice for speaker `n`.
    pub fn channel(&self, n: usize) -> Tensor {
        let (t, d, s) = (self.frames(), self.dim(), self.speakers());
        let src = self.data.data();
        let data = (0..t * d).map(|i| src[i * s + n]).collect();
        Tensor::new(vec![t, d], data).expect("non-empty block")
    }

    pub fn channels(&self) -> Vec<Tensor> {
        (0..self.speakers()).map(|n| self.channel(n)).collect()
    }

    /// Frames `[start, start + len)` of every channel.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() || len == 0 {
            return Err(Error::invalid(format!(
                "frame range {start}..{} outside {} frames",
                start + len,
                self.frames()
            )));
        }
        let row = self.dim() * self.speakers();
        let data = self.data.data()[start * row..(start + len) * row].to_vec();
        Self::new(
            Tensor::new(vec![len, self.dim(), self.speakers()], data)?,
            self.offset + start as f64 / self.frame_rate,
            self.frame_rate,
            self.kind,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Generator ground truth.
    Oracle,
    /// Extracted from a diarization log.
    Log,
    File,
}

/// Unit-norm speaker embeddings stored as the columns of a `D_I × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbeddingSet {
    pub vectors: Tensor,
    pub source: EmbeddingSource,
    /// `true` for speakers whose vector is the global-mean fallback.
    pub fallback: Vec<bool>,
}

impl SpeakerEmbeddingSet {
    /// Normalises each column to unit length.
    pub fn from_columns(columns: &[Vec<f64>], source: EmbeddingSource) -> Result<Self> {
        let d = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("no speaker vectors"))?;
        let n = columns.len();
        let mut data = vec![0.0; d * n];
        for (c, col) in columns.iter().enumerate() {
            if col.len() != d {
                return Err(Error::invalid("speaker vectors of differing length"));
            }
            let unit = normalized(col);
            for (i, v) in unit.into_iter().enumerate() {
                data[i * n + c] = v;
            }
        }
        Ok(Self {
            vectors: Tensor::new(vec![d, n], data)?,
            source,
            fallback: vec![false; n],
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn speakers(&self) -> usize {
        self.vectors.cols()
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.vectors.at(i, n)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.speakers()).map(|n| self.column(n)).collect()
    }
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
