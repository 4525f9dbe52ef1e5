//! Dense row-major tensors over `f32`/`f64` and the forward math used by
//! the network: matmul, softmax, layer norm, pooling.

use crate::error::{Error, Result};

/// Floating-point element type. Training runs at `f32`; gradient checking
/// runs at `f64` where finite differences are reliable.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array. Rank 1 (`[n]`) and rank 2 (`[rows, cols]`) cover
/// everything this crate computes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D constructor from nested rows (test convenience).
    pub fn from_rows(rows: &[&[F]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (a 1-D tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn mul_elem(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "mul shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Converts element type (used to move checkpoints between precisions).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `a[m,k] @ b[k,n] -> [m,n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a[m,k] @ b[n,k]^T -> [m,n]`.
pub fn matmul_bt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut dot = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                dot += x * y;
            }
            out[i * n + j] = dot;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a[k,m]^T @ b[k,n] -> [m,n]` (gradient helper).
pub fn matmul_at<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_at inner dims {k} vs {k2}");
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Row-wise softmax with an optional boolean mask (`true` = position is
/// attendable). Errors if any row is fully masked.
pub fn softmax_rows<F: Scalar>(logits: &Tensor<F>, mask: Option<&[bool]>) -> Result<Tensor<F>> {
    let (m, n) = (logits.rows(), logits.cols());
    if let Some(mask) = mask {
        assert_eq!(mask.len(), m * n, "mask size");
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = logits.row(i);
        let allowed = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
        let mut max = F::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == F::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut denom = F::zero();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Per-row statistics used by layer norm and its gradient.
pub(crate) fn row_norm_stats<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<F>()
        / n;
    (mean, (var + eps).sqrt())
}

/// Layer normalization over the last dimension: each row is standardized,
/// then scaled and shifted.
pub fn layer_norm_rows<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    let (m, n) = (x.rows(), x.cols());
    assert_eq!(gain.len(), n, "gain length");
    assert_eq!(bias.len(), n, "bias length");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = x.row(i);
        let (mean, std) = row_norm_stats(row, eps);
        for (j, &v) in row.iter().enumerate() {
            out[i * n + j] = (v - mean) / std * gain.data[j] + bias.data[j];
        }
    }
    Tensor {
        shape: x.shape.to_vec(),
        data: out,
    }
}

/// Elementwise min, max and mean over the rows of `x`, stacked in that
/// order as a `[3, cols]` tensor.
pub fn pool_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (m, n) = (x.rows(), x.cols());
    assert!(m > 0, "pooling over zero rows");
    let mut out = vec![F::zero(); 3 * n];
    let inv_m = F::one() / F::from_f64(m as f64);
    for j in 0..n {
        let mut min = x.at(0, j);
        let mut max = min;
        let mut sum = F::zero();
        for i in 0..m {
            let v = x.at(i, j);
            if v < min {
                min = v;
            }
            if v > max {
                max = v;
            }
            sum += v;
        }
        out[j] = min;
        out[n + j] = max;
        out[2 * n + j] = sum * inv_m;
    }
    Tensor {
        shape: vec![3, n],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let cbt = matmul_bt(&a, &Tensor::from_rows(&[&[5.0, 7.0], &[6.0, 8.0]]));
        assert_eq!(cbt.data(), c.data());
        let cat = matmul_at(&Tensor::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]), &b);
        assert_eq!(cat.data(), c.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_rows(&[&[0.1f64, 2.0, -1.0], &[5.0, 5.0, 5.0]]);
        let s = softmax_rows(&x, None).unwrap();
        for i in 0..2 {
            assert_relative_eq!(s.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(s.at(1, 0), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::from_rows(&[&[0.0f64, 1.0]]);
        let err = softmax_rows(&x, Some(&[false, false]));
        assert!(matches!(err, Err(Error::FullyMaskedRow { row: 0 })));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::from_rows(&[&[0.0f64, 2.0]]);
        let gain = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let y = layer_norm_rows(&x, &gain, &bias, 1e-12);
        assert_relative_eq!(y.at(0, 0), -1.0, epsilon = 1e-5);
        assert_relative_eq!(y.at(0, 1), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn pool_rows_min_max_mean() {
        let x = Tensor::from_rows(&[&[0.0f64, 2.0], &[2.0, 0.0]]);
        let p = pool_rows(&x);
        assert_eq!(p.row(0), &[0.0, 0.0]);
        assert_eq!(p.row(1), &[2.0, 2.0]);
        assert_eq!(p.row(2), &[1.0, 1.0]);
    }
}
