//! Diarization error rate with an optimal one-to-one speaker mapping.
//!
//! Scoring sweeps the boundaries of both timelines, so every homogeneous
//! interval is handled exactly rather than on a sampled frame grid.
//! Overlapped speech is always scored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::timeline::Timeline;

/// Maximum-weight one-to-one assignment of rows to columns.
///
/// Returns, for every row, the chosen column (or `None` when the row is left
/// unmatched because no column gives it positive weight) and the total weight.
pub fn assign_max(weights: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (vec![None; rows], 0.0);
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // Hungarian method with row/column potentials, 1-based with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let (i, c) = (p[j] - 1, j - 1);
        if i < rows && c < cols && weights[i][c] > 0.0 {
            assignment[i] = Some(c);
            total += weights[i][c];
        }
    }
    (assignment, total)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DerReport {
    pub file_id: String,
    pub false_alarm: f64,
    pub missed: f64,
    pub speaker_error: f64,
    /// Scored reference speech, summed over speakers.
    pub total: f64,
    /// Hypothesis speaker → reference speaker.
    pub mapping: BTreeMap<String, String>,
}

impl DerReport {
    pub fn errors(&self) -> f64 {
        self.false_alarm + self.missed + self.speaker_error
    }

    /// `(FA + MISS + SpkErr) / TOTAL`.
    pub fn der(&self) -> f64 {
        if self.total > 0.0 {
            self.errors() / self.total
        } else if self.errors() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// Component-wise sum over files (mappings are per file and dropped).
    pub fn sum<'a>(file_id: &str, reports: impl IntoIterator<Item = &'a DerReport>) -> DerReport {
        reports.into_iter().fold(
            DerReport {
                file_id: file_id.to_string(),
                ..Default::default()
            },
            |mut acc, r| {
                acc.false_alarm += r.false_alarm;
                acc.missed += r.missed;
                acc.speaker_error += r.speaker_error;
                acc.total += r.total;
                acc
            },
        )
    }
}

struct Piece {
    len: f64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

/// Splits the union of both timelines into homogeneous pieces, skipping
/// no-score zones.
fn sweep(
    reference: &[Vec<(f64, f64)>],
    hypothesis: &[Vec<(f64, f64)>],
    no_score: &[(f64, f64)],
) -> Vec<Piece> {
    let mut bounds: Vec<f64> = reference
        .iter()
        .chain(hypothesis)
        .flatten()
        .chain(no_score)
        .flat_map(|&(s, e)| [s, e])
        .collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();

    let mut ref_cursor = vec![0usize; reference.len()];
    let mut hyp_cursor = vec![0usize; hypothesis.len()];
    let mut ns_cursor = 0usize;
    let active = |ivs: &[(f64, f64)], cur: &mut usize, a: f64, b: f64| -> bool {
        while *cur < ivs.len() && ivs[*cur].1 <= a {
            *cur += 1;
        }
        *cur < ivs.len() && ivs[*cur].0 <= a && b <= ivs[*cur].1
    };
    let mut pieces = Vec::new();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        if active(no_score, &mut ns_cursor, a, b) {
            continue;
        }
        let refs: Vec<usize> = (0..reference.len())
            .filter(|&i| active(&reference[i], &mut ref_cursor[i], a, b))
            .collect();
        let hyps: Vec<usize> = (0..hypothesis.len())
            .filter(|&i| active(&hypothesis[i], &mut hyp_cursor[i], a, b))
            .collect();
        if refs.is_empty() && hyps.is_empty() {
            continue;
        }
        pieces.push(Piece {
            len: b - a,
            refs,
            hyps,
        });
    }
    pieces
}

fn merge_zones(mut zones: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    zones.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(zones.len());
    for (s, e) in zones {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Overlap-duration matrix, rows = hypothesis speakers, columns = reference.
pub fn overlap_matrix(reference: &Timeline, hypothesis: &Timeline) -> Vec<Vec<f64>> {
    let r: Vec<_> = reference.speaker_intervals().into_values().collect();
    let h: Vec<_> = hypothesis.speaker_intervals().into_values().collect();
    let mut m = vec![vec![0.0; r.len()]; h.len()];
    for piece in sweep(&r, &h, &[]) {
        for &hi in &piece.hyps {
            for &ri in &piece.refs {
                m[hi][ri] += piece.len;
            }
        }
    }
    m
}

/// Hypothesis → reference speaker mapping maximising overlapped speech time.
pub fn optimal_speaker_map(reference: &Timeline, hypothesis: &Timeline) -> BTreeMap<String, String> {
    let ref_names = reference.speakers();
    let hyp_names = hypothesis.speakers();
    let (assign, _) = assign_max(&overlap_matrix(reference, hypothesis));
    assign
        .iter()
        .enumerate()
        .filter_map(|(h, r)| r.map(|r| (hyp_names[h].clone(), ref_names[r].clone())))
        .collect()
}

/// Scores one file. With `collar > 0`, `±collar` around every reference
/// segment boundary is excluded from all four components.
pub fn der(reference: &Timeline, hypothesis: &Timeline, collar: f64) -> Result<DerReport> {
    if !(collar >= 0.0 && collar.is_finite()) {
        return Err(Error::invalid(format!("collar {collar} must be non-negative")));
    }
    let ref_map = reference.speaker_intervals();
    let hyp_map = hypothesis.speaker_intervals();
    let ref_names: Vec<String> = ref_map.keys().cloned().collect();
    let hyp_names: Vec<String> = hyp_map.keys().cloned().collect();
    let r: Vec<_> = ref_map.into_values().collect();
    let h: Vec<_> = hyp_map.into_values().collect();
    let no_score = if collar > 0.0 {
        merge_zones(
            r.iter()
                .flatten()
                .flat_map(|&(s, e)| [(s - collar, s + collar), (e - collar, e + collar)])
                .collect(),
        )
    } else {
        Vec::new()
    };
    let pieces = sweep(&r, &h, &no_score);

    let mut overlap = vec![vec![0.0; r.len()]; h.len()];
    for piece in &pieces {
        for &hi in &piece.hyps {
            for &ri in &piece.refs {
                overlap[hi][ri] += piece.len;
            }
        }
    }
    let (assign, _) = assign_max(&overlap);

    let mut report = DerReport {
        file_id: reference.file_id.clone(),
        mapping: assign
            .iter()
            .enumerate()
            .filter_map(|(hi, ri)| ri.map(|ri| (hyp_names[hi].clone(), ref_names[ri].clone())))
            .collect(),
        ..Default::default()
    };
    for piece in &pieces {
        let nr = piece.refs.len();
        let nh = piece.hyps.len();
        let correct = piece
            .hyps
            .iter()
            .filter(|&&hi| assign[hi].is_some_and(|ri| piece.refs.contains(&ri)))
            .count();
        report.total += nr as f64 * piece.len;
        report.missed += nr.saturating_sub(nh) as f64 * piece.len;
        report.false_alarm += nh.saturating_sub(nr) as f64 * piece.len;
        report.speaker_error += (nr.min(nh) - correct) as f64 * piece.len;
    }
    Ok(report)
}

/// Scores every file in `references`; files missing from `hypotheses` count
/// as entirely missed, and hypothesis-only files are ignored.
pub fn score_files(
    references: &BTreeMap<String, Timeline>,
    hypotheses: &BTreeMap<String, Timeline>,
    collar: f64,
) -> Result<Vec<DerReport>> {
    references
        .iter()
        .map(|(id, r)| {
            let empty = Timeline::new(id.clone());
            der(r, hypotheses.get(id).unwrap_or(&empty), collar)
        })
        .collect()
}

fn pct(x: f64, total: f64) -> f64 {
    if total > 0.0 {
        100.0 * x / total
    } else {
        0.0
    }
}

/// One line per file plus a `TOTAL` line, percentages to two decimals.
pub fn format_report(reports: &[DerReport]) -> String {
    let mut out = String::new();
    let total = DerReport::sum("TOTAL", reports);
    for r in reports.iter().chain(std::iter::once(&total)) {
        writeln!(
            out,
            "{:<24} FA {:>6.2}%  MISS {:>6.2}%  SPKERR {:>6.2}%  DER {:>6.2}%",
            r.file_id,
            pct(r.false_alarm, r.total),
            pct(r.missed, r.total),
            pct(r.speaker_error, r.total),
            100.0 * r.der(),
        )
        .expect("writing to a String");
    }
    out
}
