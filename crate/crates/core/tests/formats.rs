use casanet::embedding::{EmbeddingBlock, EmbeddingKind};
use casanet::io::{faeb_from_bytes, faeb_to_bytes, parse_rttm, write_rttm};
use casanet::{Error, Rng, Segment, Tensor, Timeline};

fn random_timelines(rng: &mut Rng) -> Vec<Timeline> {
    (0..1 + rng.below(3))
        .map(|f| {
            let segs = (0..1 + rng.below(8))
                .map(|_| Segment {
                    speaker: format!("spk{}", rng.below(4)),
                    start: rng.below(6000) as f64 / 100.0,
                    duration: (1 + rng.below(1000)) as f64 / 100.0,
                })
                .collect();
            Timeline::with_segments(format!("file{f}"), segs)
        })
        .collect()
}

fn sorted(tl: &Timeline) -> Vec<(String, u64, u64)> {
    let mut v: Vec<_> = tl
        .segments
        .iter()
        .map(|s| (s.speaker.clone(), s.start.to_bits(), s.duration.to_bits()))
        .collect();
    v.sort();
    v
}

#[test]
fn rttm_round_trip_fuzz() {
    let mut rng = Rng::new(77);
    for _ in 0..1000 {
        let tls = random_timelines(&mut rng);
        let text = write_rttm(&tls);
        let back = parse_rttm(&text).unwrap();
        assert_eq!(back.len(), tls.len());
        for tl in &tls {
            assert_eq!(sorted(&back[&tl.file_id]), sorted(tl));
        }
        assert_eq!(write_rttm(back.values()), text);
    }
}

#[test]
fn faeb_round_trip_fuzz() {
    let mut rng = Rng::new(78);
    for _ in 0..1000 {
        let (t, d, n) = (1 + rng.below(20), 1 + rng.below(6), 1 + rng.below(4));
        // values representable in f32 so the round trip is exact
        let data = (0..t * d * n).map(|_| rng.normal() as f32 as f64).collect();
        let block = EmbeddingBlock::new(Tensor::new(vec![t, d, n], data).unwrap(), 0.0, 25.0, EmbeddingKind::Raw).unwrap();
        let bytes = faeb_to_bytes(&block);
        assert_eq!(bytes.len(), 24 + 4 * t * d * n);
        let back = faeb_from_bytes(&bytes).unwrap();
        assert_eq!(back.data, block.data);
        assert_eq!(faeb_to_bytes(&back), bytes);
    }
}

#[test]
fn malformed_inputs_are_located() {
    let text = "SPEAKER f 1 0.00 1.00 <NA> <NA> a <NA> <NA>\n\n; note\nSPEAKER f 1 x 1.00 <NA> <NA> a <NA> <NA>\n";
    match parse_rttm(text) {
        Err(Error::Rttm { line, reason }) => {
            assert_eq!(line, 4);
            assert!(reason.contains("tbeg"));
        }
        other => panic!("{other:?}"),
    }
    let block = EmbeddingBlock::new(Tensor::full(&[3, 2, 1], 1.5), 0.0, 25.0, EmbeddingKind::Raw).unwrap();
    let bytes = faeb_to_bytes(&block);
    match faeb_from_bytes(&bytes[..10]) {
        Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 8),
        other => panic!("{other:?}"),
    }
    match faeb_from_bytes(&bytes[..bytes.len() - 4]) {
        Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 24),
        other => panic!("{other:?}"),
    }
}
