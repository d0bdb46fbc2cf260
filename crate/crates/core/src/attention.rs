//! Multi-head scaled dot-product attention over the time axis.
//!
//! A single module serves both cross-attention (queries from one stream,
//! keys/values from the other) and self-attention (both from the same stream).
//! Inputs are `T×features` matrices for one speaker channel.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Tensor,
    xkv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head attention weights, each `T_q × T_k` with rows summing to one.
    pub weights: Vec<Tensor>,
    concat: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        name: &str,
        rng: &mut Rng,
        query_dim: usize,
        kv_dim: usize,
        d_model: usize,
        heads: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(&format!("{name}.w_q"), rng, query_dim, d_model, false),
            key: Linear::new(&format!("{name}.w_k"), rng, kv_dim, d_model, false),
            value: Linear::new(&format!("{name}.w_v"), rng, kv_dim, d_model, false),
            output: Linear::new(&format!("{name}.w_o"), rng, d_model, out_dim, false),
        })
    }

    /// Builds the module from explicit projection matrices.
    pub fn from_weights(
        name: &str,
        heads: usize,
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
    ) -> Result<Self> {
        let d_model = w_q.shape()[1];
        if w_k.shape()[1] != d_model || w_v.shape()[1] != d_model || w_o.shape()[0] != d_model {
            return Err(Error::Shape {
                op: "MultiHeadAttention::from_weights",
                left: w_q.shape().to_vec(),
                right: w_o.shape().to_vec(),
            });
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid("d_model not divisible by heads"));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::from_weights(&format!("{name}.w_q"), w_q, None),
            key: Linear::from_weights(&format!("{name}.w_k"), w_k, None),
            value: Linear::from_weights(&format!("{name}.w_v"), w_v, None),
            output: Linear::from_weights(&format!("{name}.w_o"), w_o, None),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_features()
    }

    fn check_inputs(&self, xq: &Tensor, xkv: &Tensor) -> Result<()> {
        if xq.cols() != self.query.in_features() || xkv.cols() != self.key.in_features() {
            return Err(Error::Shape {
                op: "attention",
                left: xq.shape().to_vec(),
                right: xkv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<(Tensor, AttentionCache)> {
        self.check_inputs(xq, xkv)?;
        let q = self.query.forward(xq)?;
        let k = self.key.forward(xkv)?;
        let v = self.value.forward(xkv)?;
        let dh = self.head_dim();
        let tq = xq.rows();
        let mut concat = vec![0.0; tq * self.d_model];
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul_nt(&kh)?.scale(self.scale());
            let a = scores.softmax_rows();
            let oh = a.matmul(&vh)?;
            for t in 0..tq {
                concat[t * self.d_model + h * dh..t * self.d_model + (h + 1) * dh]
                    .copy_from_slice(oh.row(t));
            }
            weights.push(a);
        }
        let concat = Tensor::new(vec![tq, self.d_model], concat)?;
        let out = self.output.forward(&concat)?;
        Ok((
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        let dconcat = self.output.backward(&cache.concat, dy)?;
        let dh = self.head_dim();
        let (tq, tk) = (cache.q.rows(), cache.k.rows());
        let mut dq = Tensor::zeros(&[tq, self.d_model]);
        let mut dk = Tensor::zeros(&[tk, self.d_model]);
        let mut dv = Tensor::zeros(&[tk, self.d_model]);
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = cache.q.slice_cols(h * dh, dh)?;
            let kh = cache.k.slice_cols(h * dh, dh)?;
            let vh = cache.v.slice_cols(h * dh, dh)?;
            let doh = dconcat.slice_cols(h * dh, dh)?;
            let da = doh.matmul_nt(&vh)?;
            let dvh = a.matmul_tn(&doh)?;
            // softmax Jacobian: dS = A ⊙ (dA − rowsum(dA ⊙ A))
            let mut ds = da;
            for r in 0..tq {
                let arow = a.row(r);
                let inner: f64 = ds.row(r).iter().zip(arow).map(|(g, p)| g * p).sum();
                for (g, p) in ds.row_mut(r).iter_mut().zip(arow) {
                    *g = p * (*g - inner) * self.scale();
                }
            }
            let dqh = ds.matmul(&kh)?;
            let dkh = ds.matmul_tn(&qh)?;
            scatter_cols(&mut dq, &dqh, h * dh);
            scatter_cols(&mut dk, &dkh, h * dh);
            scatter_cols(&mut dv, &dvh, h * dh);
        }
        let dxq = self.query.backward(&cache.xq, &dq)?;
        let mut dxkv = self.key.backward(&cache.xkv, &dk)?;
        dxkv.add_assign(&self.value.backward(&cache.xkv, &dv)?)?;
        Ok((dxq, dxkv))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.query.params_mut();
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.output.params_mut());
        v
    }
}

fn scatter_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_passes_projected_value() {
        let mut rng = Rng::new(4);
        let att = MultiHeadAttention::new("a", &mut rng, 3, 2, 4, 2, 5).unwrap();
        let xq = m(&[&[0.3, -0.1, 2.0]]);
        let xkv = m(&[&[1.5, -0.7]]);
        let (out, cache) = att.forward(&xq, &xkv).unwrap();
        for w in &cache.weights {
            assert_eq!(w.data(), &[1.0]);
        }
        let expected = att
            .output
            .forward(&att.value.forward(&xkv).unwrap())
            .unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = Rng::new(5);
        let att = MultiHeadAttention::new("a", &mut rng, 2, 2, 4, 2, 2).unwrap();
        let xq = m(&[&[1.0, 0.0], &[0.0, 2.0], &[-1.0, 1.0]]);
        let xkv = m(&[&[0.4, 0.9], &[0.4, 0.9], &[0.4, 0.9]]);
        let (_, cache) = att.forward(&xq, &xkv).unwrap();
        for w in &cache.weights {
            for &v in w.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_frame_case_matches_step_by_step_oracle() {
        // H = 1, d_model = 2: every intermediate written out by hand
        let w_q = m(&[&[1.0, 0.5], &[-0.5, 1.0]]);
        let w_k = m(&[&[0.2, 0.0], &[0.0, 0.3], &[1.0, 1.0]]);
        let w_v = m(&[&[1.0, 2.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let w_o = m(&[&[0.5], &[-1.0]]);
        let att = MultiHeadAttention::from_weights("a", 1, w_q, w_k, w_v, w_o).unwrap();
        let xq = m(&[&[1.0, 2.0], &[0.0, -1.0]]);
        let xkv = m(&[&[1.0, 0.0, 1.0], &[2.0, 1.0, 0.0]]);
        let (out, _) = att.forward(&xq, &xkv).unwrap();

        let q = [[1.0 * 1.0 + 2.0 * -0.5, 1.0 * 0.5 + 2.0 * 1.0], [0.5, -1.0]];
        let k = [[0.2 + 1.0, 1.0], [0.4, 0.3]];
        let v = [[1.0 - 1.0, 2.0], [2.0, 4.0 + 1.0]];
        let scale = 1.0 / 2f64.sqrt();
        for t in 0..2 {
            let s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * scale;
            let s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * scale;
            let (e0, e1) = (s0.exp(), s1.exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let o = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            let y = 0.5 * o[0] - 1.0 * o[1];
            assert!((out.data()[t] - y).abs() < 1e-12, "frame {t}");
        }
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let mut rng = Rng::new(0);
        assert!(MultiHeadAttention::new("a", &mut rng, 2, 2, 6, 4, 2).is_err());
    }

    #[test]
    fn rejects_mismatched_input_width() {
        let mut rng = Rng::new(0);
        let att = MultiHeadAttention::new("a", &mut rng, 2, 3, 4, 2, 2).unwrap();
        assert!(att.forward(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2])).is_err());
    }
}
