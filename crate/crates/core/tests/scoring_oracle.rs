mod support;

use casanet::scoring::der;
use casanet::Rng;
use support::{random_timeline, raster_der};

#[test]
fn event_sweep_matches_raster_oracle() {
    let mut rng = Rng::new(2024);
    for case in 0..200 {
        let r = random_timeline(&mut rng, "r", 4, 6);
        let h = random_timeline(&mut rng, "h", 4, 6);
        let fast = der(&r, &h, 0.0).unwrap();
        let slow = raster_der(&r, &h);
        for (name, a, b) in [
            ("FA", fast.false_alarm, slow.false_alarm),
            ("MISS", fast.missed, slow.missed),
            ("SPKERR", fast.speaker_error, slow.speaker_error),
            ("TOTAL", fast.total, slow.total),
        ] {
            assert!((a - b).abs() < 1e-9, "case {case} {name}: sweep {a} raster {b}\n{r:?}\n{h:?}");
        }
    }
}

#[test]
fn components_add_over_file_partitions() {
    let mut rng = Rng::new(5);
    let pairs: Vec<_> = (0..6)
        .map(|_| (random_timeline(&mut rng, "r", 3, 5), random_timeline(&mut rng, "h", 3, 5)))
        .collect();
    let reports: Vec<_> = pairs.iter().map(|(r, h)| der(r, h, 0.0).unwrap()).collect();
    let whole = casanet::scoring::DerReport::sum("all", &reports);
    let left = casanet::scoring::DerReport::sum("l", &reports[..3]);
    let right = casanet::scoring::DerReport::sum("r", &reports[3..]);
    assert!((whole.errors() - left.errors() - right.errors()).abs() < 1e-9);
    assert!((whole.total - left.total - right.total).abs() < 1e-9);
}
