//! RTTM text records and the FAEB frame-aligned embedding binary format.
//!
//! FAEB layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | magic `FAEB` |
//! | 4..8  | version `u32` = 1 |
//! | 8..12 | `T` `u32` |
//! | 12..16 | `D` `u32` |
//! | 16..20 | `N` `u32` |
//! | 20..24 | frame rate `f32` |
//! | 24..  | `T·N·D` `f32` values in `[t][n][d]` order |

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedding::{EmbeddingBlock, EmbeddingKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::timeline::{Segment, Timeline};

/// Parses RTTM text into timelines keyed by file id.
///
/// Blank lines and lines starting with `;` are skipped. Every other line must
/// be a 10-field `SPEAKER` record.
pub fn parse_rttm(text: &str) -> Result<BTreeMap<String, Timeline>> {
    let mut out: BTreeMap<String, Timeline> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        let err = |reason: String| Error::Rttm { line, reason };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", fields.len())));
        }
        if fields[0] != "SPEAKER" {
            return Err(err(format!("unsupported record type `{}`", fields[0])));
        }
        fields[2]
            .parse::<u32>()
            .map_err(|_| err(format!("channel `{}` is not an integer", fields[2])))?;
        let number = |name: &str, s: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("{name} `{s}` is not a finite number"))),
            }
        };
        let tbeg = number("tbeg", fields[3])?;
        let tdur = number("tdur", fields[4])?;
        if tbeg < 0.0 {
            return Err(err(format!("negative start time {tbeg}")));
        }
        if tdur <= 0.0 {
            return Err(err(format!("non-positive duration {tdur}")));
        }
        let file_id = fields[1].to_string();
        out.entry(file_id.clone())
            .or_insert_with(|| Timeline::new(file_id))
            .segments
            .push(Segment {
                speaker: fields[7].to_string(),
                start: tbeg,
                duration: tdur,
            });
    }
    Ok(out)
}

/// Serialises timelines as RTTM, times to two decimals, records sorted by
/// `(file id, start, speaker)`.
pub fn write_rttm<'a>(timelines: impl IntoIterator<Item = &'a Timeline>) -> String {
    let mut records: Vec<(&str, f64, &str, f64)> = timelines
        .into_iter()
        .flat_map(|t| {
            t.segments
                .iter()
                .map(move |s| (t.file_id.as_str(), s.start, s.speaker.as_str(), s.duration))
        })
        .collect();
    records.sort_by(|a, b| {
        a.0.cmp(b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(b.2))
            .then(a.3.total_cmp(&b.3))
    });
    let mut out = String::new();
    for (file, start, spk, dur) in records {
        out.push_str(&format!(
            "SPEAKER {file} 1 {start:.2} {:.2} <NA> <NA> {spk} <NA> <NA>\n",
            dur.max(0.01)
        ));
    }
    out
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<BTreeMap<String, Timeline>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_rttm(&text)
}

pub fn save_rttm<'a>(path: impl AsRef<Path>, timelines: impl IntoIterator<Item = &'a Timeline>) -> Result<()> {
    std::fs::write(path.as_ref(), write_rttm(timelines)).map_err(|e| Error::io(path.as_ref(), e))
}

pub const FAEB_MAGIC: [u8; 4] = *b"FAEB";
pub const FAEB_VERSION: u32 = 1;
const FAEB_HEADER: usize = 24;

pub fn faeb_to_bytes(block: &EmbeddingBlock) -> Vec<u8> {
    let (t, d, n) = (block.frames(), block.dim(), block.speakers());
    let mut out = Vec::with_capacity(FAEB_HEADER + 4 * t * d * n);
    out.extend_from_slice(&FAEB_MAGIC);
    out.extend_from_slice(&FAEB_VERSION.to_le_bytes());
    for v in [t, d, n] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(block.frame_rate as f32).to_le_bytes());
    for ti in 0..t {
        for ni in 0..n {
            for di in 0..d {
                out.extend_from_slice(&(block.get(ti, di, ni) as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn faeb_from_bytes(bytes: &[u8]) -> Result<EmbeddingBlock> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != FAEB_MAGIC {
        return Err(Error::BadMagic {
            expected: FAEB_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FAEB_VERSION {
        return Err(Error::Version {
            expected: FAEB_VERSION,
            found: version,
        });
    }
    let (t, d, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let frame_rate = r.f32()? as f64;
    if t == 0 || d == 0 || n == 0 {
        return Err(Error::invalid(format!("FAEB header declares an empty block {t}×{d}×{n}")));
    }
    let declared = 4 * t * d * n;
    let actual = bytes.len() - FAEB_HEADER;
    if actual != declared {
        if actual < declared {
            return Err(Error::Truncated {
                offset: FAEB_HEADER,
                needed: declared,
                available: actual,
            });
        }
        return Err(Error::PayloadSize { declared, actual });
    }
    let mut data = vec![0.0; t * d * n];
    for ti in 0..t {
        for ni in 0..n {
            for di in 0..d {
                data[(ti * d + di) * n + ni] = r.f32()? as f64;
            }
        }
    }
    EmbeddingBlock::new(Tensor::new(vec![t, d, n], data)?, 0.0, frame_rate, EmbeddingKind::Raw)
}

pub fn write_faeb(path: impl AsRef<Path>, block: &EmbeddingBlock) -> Result<()> {
    std::fs::write(path.as_ref(), faeb_to_bytes(block)).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_faeb(path: impl AsRef<Path>) -> Result<EmbeddingBlock> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    faeb_from_bytes(&bytes)
}

/// Little-endian cursor that reports the byte offset of any short read.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
