//! Affine and convolutional building blocks with hand-written backward passes.
//!
//! Every layer works on `T×features` matrices. `backward` accumulates into the
//! parameter gradients and returns the gradient with respect to the input.

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Xavier/Glorot uniform matrix of shape `fan_in × fan_out`.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| limit * (2.0 * rng.uniform() - 1.0))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

/// `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(name: &str, rng: &mut Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn from_weights(name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.value)?;
        if let Some(b) = &self.bias {
            let bias = b.value.data();
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let (rows, fin, fout) = (x.rows(), self.in_features(), self.out_features());
        gemm_tn(x.data(), dy.data(), self.weight.grad.data_mut(), rows, fin, fout);
        if let Some(b) = &mut self.bias {
            for (g, s) in b.grad.data_mut().iter_mut().zip(dy.sum_rows()) {
                *g += s;
            }
        }
        let mut dx = vec![0.0; rows * fin];
        gemm_nt(dy.data(), self.weight.value.data(), &mut dx, rows, fout, fin);
        Tensor::new(vec![rows, fin], dx)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::new(out.shape().to_vec(), data).expect("same shape")
}

/// 1-D convolution over time with zero "same" padding.
///
/// The weight is stored as a `(kernel·in) × out` matrix whose row
/// `k·in + c` multiplies input channel `c` at time offset `k - kernel/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn new(name: &str, rng: &mut Rng, kernel: usize, fan_in: usize, fan_out: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernel");
        Self {
            kernel,
            linear: Linear::new(name, rng, kernel * fan_in, fan_out, true),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.linear.in_features() / self.kernel
    }

    /// Lays out each time step's receptive field as one row.
    pub fn unfold(&self, x: &Tensor) -> Result<Tensor> {
        let (t, c) = (x.rows(), x.cols());
        if c != self.in_channels() {
            return Err(Error::Shape {
                op: "conv1d",
                left: x.shape().to_vec(),
                right: vec![self.kernel, self.in_channels()],
            });
        }
        if t < self.kernel {
            return Err(Error::invalid(format!(
                "sequence of {t} frames is shorter than the kernel span {}",
                self.kernel
            )));
        }
        let half = self.kernel / 2;
        let width = self.kernel * c;
        let mut cols = vec![0.0; t * width];
        for ti in 0..t {
            for k in 0..self.kernel {
                let src = ti as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let dst = ti * width + k * c;
                cols[dst..dst + c].copy_from_slice(x.row(src as usize));
            }
        }
        Tensor::new(vec![t, width], cols)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let cols = self.unfold(x)?;
        let y = self.linear.forward(&cols)?;
        Ok((y, cols))
    }

    pub fn backward(&mut self, cols: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dcols = self.linear.backward(cols, dy)?;
        let c = self.in_channels();
        let t = cols.rows();
        let half = self.kernel / 2;
        let mut dx = Tensor::zeros(&[t, c]);
        for ti in 0..t {
            for k in 0..self.kernel {
                let src = ti as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let g = &dcols.row(ti)[k * c..(k + 1) * c];
                for (d, v) in dx.row_mut(src as usize).iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_adds_bias() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let l = Linear::from_weights("l", w, Some(b));
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 2.5, -2.5]);
    }

    #[test]
    fn conv_matches_hand_convolution() {
        // one input channel, one output, kernel [1, 2, 3], bias 0.5
        let w = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let conv = Conv1d {
            kernel: 3,
            linear: Linear::from_weights("c", w, Some(Tensor::new(vec![1], vec![0.5]).unwrap())),
        };
        let x = Tensor::new(vec![5, 1], vec![1.0, -1.0, 2.0, 0.0, 4.0]).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        let xs = [0.0, 1.0, -1.0, 2.0, 0.0, 4.0, 0.0];
        for t in 0..5 {
            let expected = 1.0 * xs[t] + 2.0 * xs[t + 1] + 3.0 * xs[t + 2] + 0.5;
            assert!((y.data()[t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_short_sequences() {
        let mut rng = Rng::new(0);
        let conv = Conv1d::new("c", &mut rng, 3, 2, 2);
        assert!(conv.forward(&Tensor::zeros(&[2, 2])).is_err());
    }
}
