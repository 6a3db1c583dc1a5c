//! Dense row-major tensors and the plain (non-differentiable) numeric kernels
//! shared by the autodiff graph and the straight-line reference paths.

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with rank between 1 and 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim(format!("rank must be 1..=3, got shape {shape:?}")));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|x| x.iter().copied()).collect();
        Tensor::new(&[r, c], data).expect("valid literal matrix")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("valid zero shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Matrix view of the tensor: rank-1 tensors are a single row,
    /// rank-3 tensors fold their two leading axes into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [a, b, c] => (a * b, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().0
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.matrix_dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    /// Copies columns `start..start + len` into a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = self.matrix_dims();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Tensor {
            shape: vec![r, len],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

/// Standard matrix product of two matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims();
    let (k2, n) = b.matrix_dims();
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes a row-major
/// operand. `m × k` and `k × n` are the extents after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents addressed
    // by the strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid(m: &Tensor) -> Tensor {
    m.map(sigmoid_scalar)
}

pub fn relu(m: &Tensor) -> Tensor {
    m.map(|v| v.max(0.0))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.matrix_dims();
    if c == 0 {
        return Err(Error::dim("softmax over an empty row"));
    }
    let mut out = m.clone();
    for i in 0..r {
        softmax_in_place(&mut out.data[i * c..(i + 1) * c]);
    }
    Ok(out)
}

/// Row-wise `σ(x_j) / (Σ σ(x_k) + epsilon)`.
pub fn normalized_sigmoid_rows(m: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::param(format!(
            "normalized sigmoid epsilon must be positive, got {epsilon}"
        )));
    }
    let (r, c) = m.matrix_dims();
    let mut out = m.clone();
    for i in 0..r {
        normalized_sigmoid_in_place(&mut out.data[i * c..(i + 1) * c], epsilon);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

pub(crate) fn normalized_sigmoid_in_place(row: &mut [f64], epsilon: f64) {
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = sigmoid_scalar(*v);
        total += *v;
    }
    let denom = total + epsilon;
    for v in row.iter_mut() {
        *v /= denom;
    }
}

/// Variance offset inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalizes every row of `m` over its last axis, then applies per-feature
/// `scale` and `shift`.
pub fn layer_norm(m: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let (r, c) = m.matrix_dims();
    if scale.len() != c || shift.len() != c {
        return Err(Error::dim(format!(
            "layer norm over {c} features got scale {} / shift {}",
            scale.len(),
            shift.len()
        )));
    }
    let mut out = m.clone();
    for i in 0..r {
        let row = &mut out.data[i * c..(i + 1) * c];
        let (mean, inv_std) = row_moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * scale[j] + shift[j];
        }
    }
    Ok(out)
}

/// Mean and `1/√(var + eps)` of a row, with the biased variance.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]);
        let p = m.matmul(&ones).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_left_operand() {
        let b = Tensor::new(&[3, 4], (0..12).map(f64::from).collect()).unwrap();
        let p = Tensor::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(p, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_gemm_matches_explicit_transpose() {
        let a = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 1.0]).unwrap();
        let b = Tensor::new(&[3, 4], (0..12).map(|v| v as f64 * 0.25).collect()).unwrap();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, a.data(), true, b.data(), false, &mut c, 0.0);
        let expect = a.transpose().matmul(&b).unwrap();
        assert_eq!(c, expect.data());

        let bt = b.transpose();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, a.transpose().data(), false, bt.data(), true, &mut c2, 0.0);
        assert_eq!(c2, expect.data());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[7.5, 7.5]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let e = 1f64.exp();
        assert!((s.at(1, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.at(1, 0) - 0.7311).abs() < 1e-4);
        assert!((s.at(1, 1) - 0.2689).abs() < 1e-4);
        let single = softmax_rows(&Tensor::from_rows(&[&[-123.4]])).unwrap();
        assert_eq!(single.data(), &[1.0]);
    }

    #[test]
    fn sigmoid_examples() {
        let s = sigmoid(&Tensor::new(&[3], vec![0.0, 100.0, 1.0]).unwrap());
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
        assert!((s.data()[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((s.data()[2] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn normalized_sigmoid_examples() {
        let eps = 1e-12;
        let out = normalized_sigmoid_rows(&Tensor::from_rows(&[&[0.0, 0.0]]), eps).unwrap();
        assert!((out.at(0, 0) - 0.5).abs() < 1e-9);
        let out = normalized_sigmoid_rows(&Tensor::from_rows(&[&[0.0]]), eps).unwrap();
        assert!((out.at(0, 0) - 1.0).abs() < 1e-9);
        let out = normalized_sigmoid_rows(&Tensor::from_rows(&[&[1.0, 0.0]]), eps).unwrap();
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        assert!((out.at(0, 0) - s1 / (s1 + 0.5)).abs() < 1e-12);
        assert!((out.at(0, 0) - 0.5938).abs() < 1e-4);
        assert!((out.at(0, 1) - 0.4062).abs() < 1e-4);
    }

    #[test]
    fn normalized_sigmoid_rejects_non_positive_epsilon() {
        let m = Tensor::from_rows(&[&[0.0]]);
        assert!(matches!(normalized_sigmoid_rows(&m, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(normalized_sigmoid_rows(&m, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn relu_and_layer_norm_examples() {
        assert_eq!(relu(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).data(), &[0.0, 2.0]);
        let ln = layer_norm(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]]), &[1.0; 3], &[0.0; 3]).unwrap();
        // mean 2, biased variance 2/3
        let z = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((ln.at(0, 0) + z).abs() < 1e-12);
        assert!((ln.at(0, 2) - z).abs() < 1e-12);
        assert!((ln.at(0, 0) + 1.2247).abs() < 1e-3);
        assert_eq!(ln.at(0, 1), 0.0);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }
}
