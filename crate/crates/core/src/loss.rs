//! Masked binary cross-entropy evaluated from logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    /// d loss / d logit, same shape as the logits.
    pub grad: Tensor,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over masked cells of `-[y ln p + (1-y) ln(1-p)]` with `p = sigmoid(z)`.
///
/// Written as `max(z,0) - z y + ln(1 + e^{-|z|})`, which never evaluates
/// `ln(0)`. Targets may be soft (in `[0, 1]`) for mixed-up samples.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<BceOutput> {
    if logits.shape() != targets.shape() || logits.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "bce_with_logits",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let count: f64 = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
    if count == 0.0 {
        return Err(Error::EmptyLoss);
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (((&z, &y), &m), g) in logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .zip(grad.data_mut())
    {
        if m == 0.0 {
            continue;
        }
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) / count;
    }
    Ok(BceOutput {
        loss: loss / count,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        // sigmoid(40) rounds to exactly 1.0 in f64
        assert_eq!(sigmoid(40.0), 1.0);
        let out = bce_with_logits(&t(&[40.0]), &t(&[1.0]), &t(&[1.0])).unwrap();
        assert!(out.loss < 1e-17);
    }

    #[test]
    fn half_probability_costs_ln2() {
        for y in [0.0, 1.0] {
            let out = bce_with_logits(&t(&[0.0]), &t(&[y]), &t(&[1.0])).unwrap();
            assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = Rng::new(11);
        let z: Vec<f64> = (0..4).map(|_| 4.0 * rng.normal()).collect();
        let y = [1.0, 0.0, 0.0, 1.0];
        let mask = [1.0, 1.0, 0.0, 1.0];
        let out = bce_with_logits(&t(&z), &t(&y), &t(&mask)).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            if mask[i] == 0.0 {
                continue;
            }
            let p = 1.0 / (1.0 + (-z[i]).exp());
            expected += -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
        }
        expected /= 3.0;
        assert!((out.loss - expected).abs() < 1e-12);
        assert_eq!(out.grad.data()[2], 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let err = bce_with_logits(&t(&[0.3]), &t(&[1.0]), &t(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::EmptyLoss));
    }

    #[test]
    fn gradient_matches_central_difference() {
        let z = [0.3, -1.7, 2.2];
        let y = t(&[1.0, 0.0, 0.4]);
        let m = t(&[1.0; 3]);
        let out = bce_with_logits(&t(&z), &y, &m).unwrap();
        for i in 0..3 {
            let mut up = z;
            let mut dn = z;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (bce_with_logits(&t(&up), &y, &m).unwrap().loss
                - bce_with_logits(&t(&dn), &y, &m).unwrap().loss)
                / 2e-6;
            assert!((fd - out.grad.data()[i]).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn non_negative_and_zero_only_when_exact(
            zs in proptest::collection::vec(-30.0f64..30.0, 1..8),
            bits in proptest::collection::vec(proptest::bool::ANY, 8),
        ) {
            let y: Vec<f64> = zs.iter().zip(&bits).map(|(_, &b)| if b { 1.0 } else { 0.0 }).collect();
            let out = bce_with_logits(&t(&zs), &t(&y), &t(&vec![1.0; zs.len()])).unwrap();
            proptest::prop_assert!(out.loss > 0.0);
        }
    }
}
