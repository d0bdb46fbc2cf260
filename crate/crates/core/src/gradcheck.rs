//! Central-difference verification of hand-derived gradients.

use crate::error::{Error, Result};
use crate::optim::Parameterized;

/// Denominator floor for relative errors, so gradients that are analytically
/// near zero are judged on absolute agreement.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares the gradients written by `analytic` against central differences
/// of `loss` for every element of every parameter.
///
/// `analytic` receives the model with zeroed gradients and must fill them.
/// The loss closure is evaluated twice up front; any disagreement between the
/// two evaluations is reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<M, L, G>(
    model: &mut M,
    loss: L,
    analytic: G,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    L: Fn(&M) -> f64,
    G: FnOnce(&mut M),
{
    let first = loss(model);
    let second = loss(model);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    model.zero_grad();
    analytic(model);
    let analytic_grads: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut params = Vec::with_capacity(analytic_grads.len());
    for (pi, grads) in analytic_grads.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + eps;
            let up = loss(model);
            model.params_mut()[pi].value.data_mut()[i] = orig - eps;
            let down = loss(model);
            model.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.0 || rel.is_nan() {
                worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
            }
        }
        params.push(ParamCheck {
            name: model.params()[pi].name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport {
        tolerance: tol,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Parameter;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    struct Quad(Parameter);

    impl Parameterized for Quad {
        fn params(&self) -> Vec<&Parameter> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.0]
        }
    }

    fn quad() -> Quad {
        Quad(Parameter::new(
            "x",
            Tensor::new(vec![4], vec![0.5, -1.25, 3.0, 0.01]).unwrap(),
        ))
    }

    fn sum_sq(m: &Quad) -> f64 {
        m.0.value.data().iter().map(|v| v * v).sum()
    }

    fn two_x(m: &mut Quad) {
        let g: Vec<f64> = m.0.value.data().iter().map(|v| 2.0 * v).collect();
        m.0.grad.data_mut().copy_from_slice(&g);
    }

    #[test]
    fn sum_of_squares_passes() {
        let mut m = quad();
        let report = finite_diff_check(&mut m, sum_sq, two_x, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut m = quad();
        let report = finite_diff_check(
            &mut m,
            sum_sq,
            |m: &mut Quad| {
                two_x(m);
                m.0.grad.data_mut()[1] += 0.1;
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].worst_index, 1);
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut m = quad();
        let calls = Cell::new(0u32);
        let err = finite_diff_check(
            &mut m,
            |m: &Quad| {
                calls.set(calls.get() + 1);
                sum_sq(m) + calls.get() as f64
            },
            two_x,
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn values_restored_after_check() {
        let mut m = quad();
        let before = m.0.value.clone();
        finite_diff_check(&mut m, sum_sq, two_x, 1e-5, 1e-6).unwrap();
        assert_eq!(m.0.value, before);
    }
}
