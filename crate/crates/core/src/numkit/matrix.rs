use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, MeloError, Result};
use crate::rng::Rng;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Samples every entry from `N(0, std^2)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MeloError::Numeric(op.to_string()))
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN
    /// payloads.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        gemm(n, k, m, &self.data, (k, 1), &rhs.data, (m, 1), &mut out.data);
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(n, m);
        gemm(n, k, m, &self.data, (k, 1), &rhs.data, (1, k), &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(shape_err(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.cols, self.rows, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        gemm(n, k, m, &self.data, (1, n), &rhs.data, (m, 1), &mut out.data);
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(), rhs.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, rhs: &Matrix) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copies columns `range` into a new `rows x range.len()` matrix.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.cols {
            return Err(shape_err(
                "slice_cols",
                format!("{range:?} of {} columns", self.cols),
            ));
        }
        let w = range.len();
        let mut out = Matrix::zeros(self.rows, w);
        for r in 0..self.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&self.row(r)[range.clone()]);
        }
        Ok(out)
    }

    /// Copies rows `range` into a new `range.len() x cols` matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.rows {
            return Err(shape_err(
                "slice_rows",
                format!("{range:?} of {} rows", self.rows),
            ));
        }
        Ok(Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }

    /// Appends `extra` columns on the right.
    pub fn hcat(&self, extra: &Matrix) -> Result<Matrix> {
        if self.rows != extra.rows {
            return Err(shape_err(
                "hcat",
                format!("{:?} | {:?}", self.shape(), extra.shape()),
            ));
        }
        let cols = self.cols + extra.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(extra.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Appends `extra` rows at the bottom.
    pub fn vcat(&self, extra: &Matrix) -> Result<Matrix> {
        if self.cols != extra.cols {
            return Err(shape_err(
                "vcat",
                format!("{:?} over {:?}", self.shape(), extra.shape()),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&extra.data);
        Ok(Matrix {
            rows: self.rows + extra.rows,
            cols: self.cols,
            data,
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = a · b` for an `n×k` by `k×m` product; strides are `(row, col)`.
fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if n == 0 || m == 0 {
        return;
    }
    // SAFETY: the callers checked shapes, so every strided index stays inside
    // `a`, `b` and the row-major `n×m` output.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_times_m_is_m() {
        let m = Matrix::gaussian(3, 4, 1.0, &mut seeded(1));
        assert!(Matrix::identity(3).matmul(&m).unwrap().bits_eq(&m));
    }

    #[test]
    fn zero_times_m_is_zero() {
        let m = Matrix::gaussian(3, 4, 1.0, &mut seeded(2));
        let z = Matrix::zeros(2, 3).matmul(&m).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn hand_computed_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(MeloError::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = seeded(3);
        let a = Matrix::gaussian(4, 5, 1.0, &mut rng);
        let b = Matrix::gaussian(6, 5, 1.0, &mut rng);
        let c = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = a.matmul_tn(&c).unwrap();
        let explicit = a.transpose().matmul(&c).unwrap();
        for (x, y) in tn.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_products_do_not_depend_on_batch_size() {
        let mut rng = seeded(4);
        let a = Matrix::gaussian(7, 16, 1.0, &mut rng);
        let w = Matrix::gaussian(16, 9, 1.0, &mut rng);
        let full = a.matmul(&w).unwrap();
        for r in 0..7 {
            let single = a.slice_rows(r..r + 1).unwrap().matmul(&w).unwrap();
            assert!(single.bits_eq(&full.slice_rows(r..r + 1).unwrap()));
        }
    }
}
