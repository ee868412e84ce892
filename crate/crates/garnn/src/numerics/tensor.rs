//! Dense row-major tensors, double precision.

use crate::error::{Error, Result};

/// A dense tensor: shape plus values in row-major order.
///
/// Value count always equals the product of the shape. Operations never
/// produce NaN/Inf silently; finiteness is checked at the boundaries where
/// it matters (loss values, optimizer steps in debug mode) via
/// [`Tensor::validate_finite`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match value count {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
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

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// 2-D accessor; panics if the tensor is not a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2, "at() needs a matrix");
        self.data[i * self.shape[1] + j]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a matrix");
        self.shape[1]
    }

    /// Surfaces NaN/Inf as an error instead of letting it propagate.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: what.to_string(),
            })
        }
    }
}

// Raw kernels shared by the tape's forward and backward passes. All take
// explicit dimensions and write into preallocated output slices.

/// out += a (m×k) · b (k×n)
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out += a (m×k) · bᵀ where b is n×k
pub(crate) fn matmul_tb_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += aᵀ (k×m stored as m×k) · b (m×n)
pub(crate) fn matmul_ta_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_ij;
            }
        }
    }
}

/// out += a (m×n) · x (n)
pub(crate) fn matvec_acc(a: &[f64], x: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (p, q) in row.iter().zip(x.iter()) {
            acc += p * q;
        }
        out[i] += acc;
    }
}

/// out += aᵀ (n×m stored as m×n) · y (m)
pub(crate) fn matvec_t_acc(a: &[f64], y: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(y.len(), m);
    debug_assert_eq!(out.len(), n);
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, &a_ij) in out.iter_mut().zip(row.iter()) {
            *o += yi * a_ij;
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_matches_len() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.at(1, 2), 6.0);
    }

    #[test]
    #[should_panic]
    fn tensor_rejects_bad_shape() {
        Tensor::new(vec![2, 2], vec![1.0]);
    }

    #[test]
    fn validate_finite_flags_nan() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]);
        assert!(t.validate_finite("test").is_err());
        let u = Tensor::new(vec![2], vec![1.0, 2.0]);
        assert!(u.validate_finite("test").is_ok());
    }

    #[test]
    fn matmul_kernel_identity() {
        let eye = Tensor::identity(3);
        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 6];
        matmul_acc(eye.data(), m.data(), &mut out, 3, 3, 2);
        assert_eq!(out, m.data());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(1000.0) <= 1.0);
        assert!(sigmoid_scalar(-1000.0) >= 0.0);
        assert!(sigmoid_scalar(-1000.0).is_finite());
    }
}
