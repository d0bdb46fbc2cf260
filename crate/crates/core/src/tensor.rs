//! Dense row-major `f64` tensors and the handful of kernels the models need.
//!
//! Every reduction runs left to right in a single thread, so results are
//! bit-reproducible for identical inputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of every dimension after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · other` for `M×K` and `K×P` matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm_nn(&self.data, &other.data, &mut out, m, k, p);
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `selfᵀ · other` for `K×M` and `K×P` matrices.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        self.require_matrix("matmul_tn")?;
        other.require_matrix("matmul_tn")?;
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, p) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm_tn(&self.data, &other.data, &mut out, k, m, p);
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `self · otherᵀ` for `M×K` and `P×K` matrices.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        self.require_matrix("matmul_nt")?;
        other.require_matrix("matmul_nt")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (p, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm_nt(&self.data, &other.data, &mut out, m, k, p);
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = first.rows();
        for p in parts {
            p.require_matrix("concat_cols")?;
            if p.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            shape: vec![rows, width],
            data,
        })
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        self.require_matrix("slice_cols")?;
        if start + width > self.cols() || width == 0 {
            return Err(Error::invalid(format!(
                "column slice {start}..{} of {:?}",
                start + width,
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(self.rows() * width);
        for r in 0..self.rows() {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Self {
            shape: vec![self.rows(), width],
            data,
        })
    }

    /// Sum over rows, giving a length-`cols` vector.
    pub fn sum_rows(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        softmax_rows_in_place(&mut out.data, self.cols());
        out
    }
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

// out[M×P] += a[M×K] · b[K×P]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

// out[M×P] += a[K×M]ᵀ · b[K×P]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, p: usize) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * p..(kk + 1) * p];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

// out[M×P] += a[M×K] · b[P×K]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * p + j] += dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorise while keeping a fixed order
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
        let data = (0..r * c).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn identity_times_x_is_x() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn hand_worked_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_annihilates() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 2, 2, 1.0);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(z.matmul(&x).unwrap(), z);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::new(9);
        let a = random(&mut rng, 5, 3, 1.0);
        let b = random(&mut rng, 5, 4, 1.0);
        let c = random(&mut rng, 6, 3, 1.0);
        let tn = a.matmul_tn(&b).unwrap();
        let tn_ref = a.transpose().unwrap().matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&tn_ref) < 1e-14);
        let nt = a.matmul_nt(&c).unwrap();
        let nt_ref = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&nt_ref) < 1e-14);
    }

    #[test]
    fn matmul_is_associative_on_random_chains() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let a = random(&mut rng, 3, 3, 2.0);
            let b = random(&mut rng, 3, 3, 2.0);
            let c = random(&mut rng, 3, 3, 2.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let s = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap().softmax_rows();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let base = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap().softmax_rows();
        for c in [-50.0, 0.5, 1e3] {
            let shifted = Tensor::from_rows(&[vec![c + 1.0, c + 2.0, c + 3.0]])
                .unwrap()
                .softmax_rows();
            assert!(base.max_abs_diff(&shifted) < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_scalar_exp_normalise() {
        // independent route: no max subtraction, plain exp / sum
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        let s = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap().softmax_rows();
        for (a, b) in s.data().iter().zip(&e) {
            assert!((a - b / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_including_large_magnitudes() {
        let mut rng = Rng::new(5);
        for i in 0..1000 {
            let scale = if i % 2 == 0 { 1e3 } else { 5.0 };
            let x = random(&mut rng, 1, 7, scale);
            let s = x.softmax_rows();
            assert!(s.data().iter().all(|&v| v >= 0.0));
            assert!((s.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut rng = Rng::new(1);
        let a = random(&mut rng, 4, 2, 1.0);
        let b = random(&mut rng, 4, 3, 1.0);
        let cat = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(cat.slice_cols(0, 2).unwrap(), a);
        assert_eq!(cat.slice_cols(2, 3).unwrap(), b);
    }

    #[test]
    fn constructor_validates_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
