use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`, the tensor type used throughout the crate.
///
/// Rows are tokens and columns are features unless a function says otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix2D {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix2D::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Repeats `row` `count` times.
    pub fn broadcast_row(row: &[f64], count: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * count);
        for _ in 0..count {
            data.extend_from_slice(row);
        }
        Self { rows: count, cols: row.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn same_shape(&self, other: &Matrix2D) -> bool {
        self.shape() == other.shape()
    }

    /// Standard product `self × other`.
    pub fn matmul(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        Ok(self.mm(other))
    }

    /// `self × other` for operands whose shapes are known to agree.
    pub(crate) fn mm(&self, other: &Matrix2D) -> Matrix2D {
        assert_eq!(self.cols, other.rows, "mm: {:?} x {:?}", self.shape(), other.shape());
        let mut out = Matrix2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * other.cols..(p + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ × other`.
    pub(crate) fn mm_tn(&self, other: &Matrix2D) -> Matrix2D {
        assert_eq!(self.rows, other.rows, "mm_tn: {:?} x {:?}", self.shape(), other.shape());
        let mut out = Matrix2D::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self × otherᵀ`.
    pub(crate) fn mm_nt(&self, other: &Matrix2D) -> Matrix2D {
        assert_eq!(self.cols, other.cols, "mm_nt: {:?} x {:?}", self.shape(), other.shape());
        let mut out = Matrix2D::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix2D {
        Matrix2D::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if !self.same_shape(other) {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix2D) -> Result<Matrix2D> {
        if !self.same_shape(other) {
            return Err(Error::shape("sub", self.shape(), other.shape()));
        }
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Matrix2D {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2D {
        Matrix2D { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix2D, f: impl Fn(f64, f64) -> f64) -> Matrix2D {
        assert!(self.same_shape(other), "zip_map: {:?} vs {:?}", self.shape(), other.shape());
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Matrix2D) {
        assert!(self.same_shape(other), "axpy: {:?} vs {:?}", self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix2D) {
        self.axpy(1.0, other);
    }

    /// Adds `row` to every row.
    pub fn add_row(&self, row: &[f64]) -> Result<Matrix2D> {
        if row.len() != self.cols {
            return Err(Error::shape("add_row", self.shape(), (1, row.len())));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix2D) -> f64 {
        assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Row-wise softmax of `scale * self`, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self, scale: f64) -> Matrix2D {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r), scale);
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix2D, b: &Matrix2D) -> Matrix2D {
        let mut out = Matrix2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let m = Matrix2D::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(Matrix2D::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix2D::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let a = rng.normal_matrix(5, 7, 1.0);
        let b = rng.normal_matrix(7, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
        assert!(a.transpose().mm_tn(&b).max_abs_diff(&slow) < 1e-12);
        assert!(a.mm_nt(&b.transpose()).max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = Matrix2D::zeros(2, 3).matmul(&Matrix2D::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let m = Matrix2D::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0]]).unwrap();
        let s = m.softmax_rows(1.0);
        for c in 0..3 {
            assert!((s.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(1, 1) < 1e-300 && s.is_finite());
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let m = Matrix2D::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = m.softmax_rows(1.0);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (c, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.get(0, c) - x.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn from_raw_rejects_bad_length() {
        assert!(serde_json::from_str::<Matrix2D>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn integer_products_are_exact(seed in 0u64..500, r in 1usize..6, k in 1usize..6, c in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = Matrix2D::from_fn(r, k, |_, _| (rng.below(11) as f64) - 5.0);
            let b = Matrix2D::from_fn(k, c, |_, _| (rng.below(11) as f64) - 5.0);
            prop_assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            scale in 0.01f64..4.0,
        ) {
            let m = Matrix2D::from_rows(std::slice::from_ref(&row)).unwrap();
            let s = m.softmax_rows(scale);
            let total: f64 = s.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(s.row(0).iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted = Matrix2D::from_rows(&[row.iter().map(|v| v + shift).collect()]).unwrap();
            prop_assert!(shifted.softmax_rows(scale).max_abs_diff(&s) < 1e-9);
        }
    }
}
