//! Per-file speech segments: the common currency of scoring, logs and RTTM.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub start: f64,
    pub duration: f64,
}

impl Segment {
    pub fn new(speaker: impl Into<String>, start: f64, duration: f64) -> Result<Self> {
        if !(start >= 0.0 && start.is_finite()) {
            return Err(Error::invalid(format!("segment start {start} is negative")));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid(format!("segment duration {duration} is not positive")));
        }
        Ok(Self {
            speaker: speaker.into(),
            start,
            duration,
        })
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timeline {
    pub file_id: String,
    pub segments: Vec<Segment>,
}

impl Timeline {
    pub fn new(file_id: impl Into<String>) -> Self {
        Self {
            file_id: file_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn with_segments(file_id: impl Into<String>, segments: Vec<Segment>) -> Self {
        Self {
            file_id: file_id.into(),
            segments,
        }
    }

    /// Appends a segment, validating start and duration.
    pub fn push(&mut self, speaker: impl Into<String>, start: f64, duration: f64) -> Result<()> {
        self.segments.push(Segment::new(speaker, start, duration)?);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct speaker names in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.segments.iter().map(|g| g.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Sorted, non-overlapping `(start, end)` intervals per speaker, with
    /// touching or overlapping segments of the same speaker merged.
    pub fn speaker_intervals(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for s in &self.segments {
            map.entry(s.speaker.clone()).or_default().push((s.start, s.end()));
        }
        for ivs in map.values_mut() {
            ivs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            let mut merged: Vec<(f64, f64)> = Vec::with_capacity(ivs.len());
            for &(s, e) in ivs.iter() {
                match merged.last_mut() {
                    Some(last) if s <= last.1 => last.1 = last.1.max(e),
                    _ => merged.push((s, e)),
                }
            }
            *ivs = merged;
        }
        map
    }

    /// Canonical form: merged per speaker, sorted by `(start, speaker)`.
    pub fn canonical(&self) -> Timeline {
        let mut segments: Vec<Segment> = self
            .speaker_intervals()
            .into_iter()
            .flat_map(|(spk, ivs)| {
                ivs.into_iter().map(move |(s, e)| Segment {
                    speaker: spk.clone(),
                    start: s,
                    duration: e - s,
                })
            })
            .collect();
        sort_segments(&mut segments);
        Timeline {
            file_id: self.file_id.clone(),
            segments,
        }
    }

    /// Total speech time summed over speakers (overlap counted per speaker).
    pub fn total_speech(&self) -> f64 {
        self.speaker_intervals()
            .values()
            .flat_map(|v| v.iter().map(|(s, e)| e - s))
            .sum()
    }

    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(Segment::end).fold(0.0, f64::max)
    }
}

pub(crate) fn sort_segments(segments: &mut [Segment]) {
    segments.sort_by(|a, b| {
        a.start
            .partial_cmp(&b.start)
            .expect("finite times")
            .then_with(|| a.speaker.cmp(&b.speaker))
            .then_with(|| a.duration.partial_cmp(&b.duration).expect("finite times"))
    });
}
