//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use casanet::{Rng, Timeline};

/// DER components in seconds from a 1 ms raster, choosing the best of all
/// partial one-to-one hyp→ref mappings by enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterDer {
    pub false_alarm: f64,
    pub missed: f64,
    pub speaker_error: f64,
    pub total: f64,
}

fn raster(tl: &Timeline, speakers: &[String], cells: usize) -> Vec<Vec<bool>> {
    let mut grid = vec![vec![false; cells]; speakers.len()];
    for seg in &tl.segments {
        let s = speakers.iter().position(|x| *x == seg.speaker).unwrap();
        let a = (seg.start * 1000.0).round() as usize;
        let b = (seg.end() * 1000.0).round() as usize;
        for c in a..b.min(cells) {
            grid[s][c] = true;
        }
    }
    grid
}

/// All partial injections from `h` items into `r` slots.
fn injections(h: usize, r: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..h {
        let mut next = Vec::new();
        for m in &out {
            next.push({
                let mut m = m.clone();
                m.push(None);
                m
            });
            for slot in 0..r {
                if !m.contains(&Some(slot)) {
                    let mut m = m.clone();
                    m.push(Some(slot));
                    next.push(m);
                }
            }
        }
        out = next;
    }
    out
}

pub fn raster_der(reference: &Timeline, hypothesis: &Timeline) -> RasterDer {
    let (rs, hs) = (reference.speakers(), hypothesis.speakers());
    let end = reference.end_time().max(hypothesis.end_time());
    let cells = (end * 1000.0).round() as usize;
    let (rg, hg) = (raster(reference, &rs, cells), raster(hypothesis, &hs, cells));
    let (mut fa, mut miss, mut both, mut total) = (0usize, 0usize, 0usize, 0usize);
    for c in 0..cells {
        let r = rg.iter().filter(|g| g[c]).count();
        let h = hg.iter().filter(|g| g[c]).count();
        fa += h.saturating_sub(r);
        miss += r.saturating_sub(h);
        both += r.min(h);
        total += r;
    }
    let best = injections(hs.len(), rs.len())
        .into_iter()
        .map(|m| {
            (0..cells)
                .map(|c| {
                    m.iter()
                        .enumerate()
                        .filter(|(hi, ri)| hg[*hi][c] && ri.is_some_and(|ri| rg[ri][c]))
                        .count()
                })
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0);
    RasterDer {
        false_alarm: fa as f64 / 1000.0,
        missed: miss as f64 / 1000.0,
        speaker_error: (both - best) as f64 / 1000.0,
        total: total as f64 / 1000.0,
    }
}

/// Up to `max_speakers` speakers and `max_segments` segments on a 1 ms grid
/// within ten seconds.
pub fn random_timeline(rng: &mut Rng, prefix: &str, max_speakers: usize, max_segments: usize) -> Timeline {
    let mut tl = Timeline::new("f");
    let speakers = 1 + rng.below(max_speakers);
    let segments = rng.below(max_segments + 1);
    for _ in 0..segments {
        let start = rng.below(9000) as f64 / 1000.0;
        let dur = (1 + rng.below(3000)) as f64 / 1000.0;
        tl.push(format!("{prefix}{}", rng.below(speakers)), start, dur).unwrap();
    }
    tl
}
