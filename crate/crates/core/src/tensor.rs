//! Dense row-major `f64` matrices and the handful of vector kernels the
//! pooling heads need.
//!
//! All reductions accumulate left to right in index order; nothing is
//! reassociated, so results are reproducible bit-for-bit.

use std::fmt;

use crate::error::{Error, Result, Shape};
use crate::flops;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}{{", self.shape())?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", self.row(r))?;
        }
        write!(f, "}}")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting zero dims, a length
    /// mismatch or any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!(
                "matrix dims must be positive, got {rows}\u{d7}{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", &[rows, cols], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {i} of {rows}\u{d7}{cols} matrix is {}",
                data[i]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Unchecked constructor for kernel outputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", &[cols], &[bad.len()]));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// An `len×1` column.
    pub fn column(values: &[f64]) -> Result<Self> {
        Matrix::new(values.len(), 1, values.to_vec())
    }

    /// A `1×len` row.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(1, values.len(), values.to_vec())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_raw(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape(vec![self.rows, self.cols])
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    /// Mutable access to the raw buffer. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Same data under a new row/column split.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(Error::shape("reshape", &self.dims(), &[rows, cols]));
        }
        Ok(Matrix::from_raw(rows, cols, self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, accumulating over the inner index in increasing order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", &self.dims(), &other.dims()));
        }
        let (m, k, p) = (self.rows, self.cols, other.cols);
        flops::add(2 * (m * k * p) as u64);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = &mut out[i * p..(i + 1) * p];
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(m, p, out))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::Invalid(format!("trace of non-square {} matrix", self.shape())));
        }
        Ok((0..self.rows).map(|i| self.get(i, i)).sum())
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape("matvec", &self.dims(), &[v.len()]));
        }
        flops::add(2 * (self.rows * self.cols) as u64);
        Ok((0..self.rows).map(|r| dot_raw(self.row(r), v)).collect())
    }

    /// `selfᵀ · v` for `v` of length `rows`, without forming the transpose.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape("tmatvec", &self.dims(), &[v.len()]));
        }
        flops::add(2 * (self.rows * self.cols) as u64);
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    /// The second-order statistic `selfᵀ · self` (`cols×cols`), fully
    /// materialized.
    pub fn gram(&self) -> Matrix {
        let (n, f) = (self.rows, self.cols);
        flops::add(2 * (n * f * f) as u64);
        let mut out = vec![0.0; f * f];
        for r in 0..n {
            let x = self.row(r);
            for i in 0..f {
                let xi = x[i];
                let o_row = &mut out[i * f..(i + 1) * f];
                for (o, &xj) in o_row.iter_mut().zip(x) {
                    *o += xi * xj;
                }
            }
        }
        Matrix::from_raw(f, f, out)
    }

    /// `⟨vec(self), vec(other)⟩ = Tr(self · otherᵀ)`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.same_shape("frobenius_dot", other)?;
        flops::add(2 * self.len() as u64);
        Ok(dot_raw(&self.data, &other.data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums, i.e. `1ᵀ · self`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// `self += other` in place.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, &self.dims(), &other.dims()));
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(op, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }
}

#[inline]
pub(crate) fn dot_raw(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("dot", &[u.len()], &[v.len()]));
    }
    flops::add(2 * u.len() as u64);
    Ok(dot_raw(u, v))
}

/// `w[i] = u[i]·v[i]`.
pub fn elementwise_mul(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::shape("elementwise_mul", &[u.len()], &[v.len()]));
    }
    flops::add(u.len() as u64);
    Ok(u.iter().zip(v).map(|(a, b)| a * b).collect())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn trace(a: &Matrix) -> Result<f64> {
    a.trace()
}

/// Outer product `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

/// Row-major location index of grid cell `(row, col)` in an `n1×n2` grid.
pub fn grid_loc(row: usize, col: usize, n2: usize) -> usize {
    row * n2 + col
}

/// Inverse of [`grid_loc`].
pub fn grid_cell(loc: usize, n2: usize) -> (usize, usize) {
    (loc / n2, loc % n2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let i2 = Matrix::identity(2);
        let v = m(&[&[2.0], &[3.0]]);
        assert_eq!(i2.matmul(&v).unwrap(), v);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&ones).unwrap(), m(&[&[3.0], &[7.0]]));
        let z = Matrix::zeros(2, 2);
        let mut rng = SplitMix64::new(1);
        let b = random(2, 5, &mut rng);
        assert_eq!(z.matmul(&b).unwrap(), Matrix::zeros(2, 5));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2\u{d7}3] vs [2\u{d7}3]"), "{msg}");
    }

    #[test]
    fn identity_matmul_is_bit_exact() {
        let mut rng = SplitMix64::new(2);
        let a = random(4, 6, &mut rng);
        assert_eq!(Matrix::identity(4).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Matrix::identity(6)).unwrap(), a);
    }

    #[test]
    fn transpose_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.transpose(), m(&[&[1.0, 3.0], &[2.0, 4.0]]));
        assert_eq!(Matrix::identity(3).transpose(), Matrix::identity(3));
        let mut rng = SplitMix64::new(3);
        let r = random(3, 7, &mut rng);
        assert_eq!(r.transpose().transpose(), r);
    }

    #[test]
    fn trace_examples() {
        assert_eq!(Matrix::identity(3).trace().unwrap(), 3.0);
        assert_eq!(m(&[&[2.0, 9.0], &[9.0, 5.0]]).trace().unwrap(), 7.0);
        assert!(Matrix::zeros(2, 3).trace().is_err());
    }

    #[test]
    fn trace_of_abt_is_flat_dot() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..20 {
            let a = random(3, 3, &mut rng);
            let b = random(3, 3, &mut rng);
            let lhs = a.matmul(&b.transpose()).unwrap().trace().unwrap();
            let rhs = dot(a.data(), b.data()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn trace_is_cyclic() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let a = random(3, 3, &mut rng);
            let b = random(3, 3, &mut rng);
            let c = random(3, 3, &mut rng);
            let abc = a.matmul(&b).unwrap().matmul(&c).unwrap().trace().unwrap();
            let cab = c.matmul(&a).unwrap().matmul(&b).unwrap().trace().unwrap();
            assert!((abc - cab).abs() <= 1e-12 * abc.abs().max(1.0));
        }
    }

    #[test]
    fn evaluation_order_is_value_level_associative() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..50 {
            let (n, f) = (1 + rng.below(12), 1 + rng.below(12));
            let x = random(n, f, &mut rng);
            let a: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let lhs = dot(&x.matvec(&a).unwrap(), &x.matvec(&b).unwrap()).unwrap();
            let rhs = dot(&a, &x.tmatvec(&x.matvec(&b).unwrap()).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(elementwise_mul(&[2.0, 3.0], &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(elementwise_mul(&[1.0, -2.0], &[3.0, 4.0]).unwrap(), vec![3.0, -8.0]);
        assert_eq!(elementwise_mul(&[1.5, -2.0], &[0.0, 0.0]).unwrap(), vec![0.0, -0.0]);
        assert!(elementwise_mul(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn construction_rejects_non_finite_and_bad_len() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn gram_matches_transpose_product() {
        let mut rng = SplitMix64::new(7);
        let x = random(5, 4, &mut rng);
        let g = x.gram();
        let g2 = x.transpose().matmul(&x).unwrap();
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_indexing_round_trips() {
        assert_eq!(grid_loc(1, 1, 2), 3);
        assert_eq!(grid_cell(3, 2), (1, 1));
        for loc in 0..49 {
            let (r, c) = grid_cell(loc, 7);
            assert_eq!(grid_loc(r, c, 7), loc);
        }
    }

    #[test]
    fn spatial_shape_flattens() {
        let s = Shape(vec![7, 7, 32]);
        assert_eq!(s.flatten_spatial(), Some(Shape(vec![49, 32])));
        assert_eq!(s.numel(), 7 * 7 * 32);
    }

    #[test]
    fn flop_counts() {
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(4, 5);
        let (_, n) = flops::measure(|| a.matmul(&b).unwrap());
        assert_eq!(n, 2 * 3 * 4 * 5);
        let (_, n) = flops::measure(|| a.gram());
        assert_eq!(n, 2 * 3 * 16);
    }
}
