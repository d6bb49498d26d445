//! Dense row-major matrices and the matrix norms used by the controller.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense real matrix stored row-major.
///
/// `Matrix::new` rejects non-finite entries. Arithmetic helpers do not
/// re-check finiteness; the norm functions do, so a NaN produced during
/// training surfaces as an error the first time it is measured.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.data[r * self.cols..(r + 1) * self.cols]
                .iter()
                .enumerate()
            {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:?}")?;
            }
        }
        write!(f, "]")
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            crate::bail!(
                InvalidInput,
                "matrix dimensions must be positive, got {rows}x{cols}"
            );
        }
        if data.len() != rows * cols {
            crate::bail!(
                InvalidInput,
                "data length {} does not match {rows}x{cols}",
                data.len()
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            crate::bail!(InvalidInput, "non-finite entry at flat index {i}");
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            crate::bail!(InvalidInput, "ragged rows");
        }
        let data = rows
            .iter()
            .flat_map(|row| row.iter().map(|&v| T::lit(v)))
            .collect();
        Self::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(alloc::format!(
                "non-finite entry at ({}, {})",
                i / self.cols,
                i % self.cols
            ))),
        }
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() == shape {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: shape,
                got: self.shape(),
            })
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                expected: (self.cols, rhs.cols),
                got: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                expected: (rhs.rows, self.cols),
                got: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let mut acc = T::zero();
                for (&x, &y) in a.iter().zip(rhs.row(j)) {
                    acc += x * y;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::Shape {
                expected: (self.rows, rhs.cols),
                got: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &y) in out_row.iter_mut().zip(b) {
                    *o += a * y;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn zip_with(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        rhs.ensure_shape(self.shape())?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        self.add_scaled(rhs, T::one())
    }

    /// `self += c · rhs`.
    pub fn add_scaled(&mut self, rhs: &Self, c: T) -> Result<()> {
        rhs.ensure_shape(self.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn fill(&mut self, value: T) {
        for v in &mut self.data {
            *v = value;
        }
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_columns(&mut self, start: usize, block: &Self) {
        for i in 0..self.rows {
            for j in 0..block.cols {
                self.set(i, start + j, block.get(i, j));
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Element-wise L1 norm: the sum of absolute entries.
pub fn l1_elementwise<T: Real>(m: &Matrix<T>) -> Result<T> {
    m.ensure_finite()?;
    Ok(m.data().iter().map(|v| v.abs()).sum())
}

/// Element-wise L1 norm of `a - b` without materialising the difference.
pub fn l1_diff<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    b.ensure_shape(a.shape())?;
    a.ensure_finite()?;
    b.ensure_finite()?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum())
}

pub fn norm_frobenius<T: Real>(m: &Matrix<T>) -> Result<T> {
    m.ensure_finite()?;
    let ss: T = m.data().iter().map(|&v| v * v).sum();
    Ok(ss.sqrt())
}

/// Subordinate infinity norm (maximum absolute row sum).
pub fn norm_subordinate_inf<T: Real>(m: &Matrix<T>) -> Result<T> {
    m.ensure_finite()?;
    Ok((0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<T>())
        .fold(T::zero(), T::max))
}

/// Subordinate one norm (maximum absolute column sum).
pub fn norm_subordinate_one<T: Real>(m: &Matrix<T>) -> Result<T> {
    m.ensure_finite()?;
    let mut sums = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(i)) {
            *s += v.abs();
        }
    }
    Ok(sums.into_iter().fold(T::zero(), T::max))
}

pub const SPECTRAL_REL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Largest singular value by power iteration on `mᵀm`.
///
/// The iteration runs in `f64` whatever `T` is. It starts from the
/// normalised all-ones vector; a second pass from a fixed non-uniform vector
/// guards against the all-ones start being orthogonal to the dominant
/// singular vector, and the larger estimate wins.
pub fn norm_spectral<T: Real>(m: &Matrix<T>) -> Result<T> {
    m.ensure_finite()?;
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let (rows, cols) = m.shape();
    let ones = vec![1.0; cols];
    let skewed: Vec<f64> = (0..cols)
        .map(|i| 0.5 + libm::fmod((i as f64 + 1.0) * 0.618_033_988_749_895, 1.0))
        .collect();
    let first = power_iterate(&a, rows, cols, ones)?;
    let second = power_iterate(&a, rows, cols, skewed)?;
    Ok(T::lit(libm::sqrt(first.max(second))))
}

/// Returns the dominant eigenvalue of `aᵀa` reached from `start`.
fn power_iterate(a: &[f64], rows: usize, cols: usize, mut v: Vec<f64>) -> Result<f64> {
    normalize(&mut v);
    let mut av = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut lambda_prev = f64::NAN;
    for _ in 0..SPECTRAL_MAX_ITERS {
        for (i, out) in av.iter_mut().enumerate() {
            *out = a[i * cols..(i + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(x, y)| x * y)
                .sum();
        }
        w.iter_mut().for_each(|x| *x = 0.0);
        for (i, &s) in av.iter().enumerate() {
            for (o, &x) in w.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                *o += x * s;
            }
        }
        let lambda = normalize(&mut w);
        if lambda == 0.0 {
            return Ok(0.0);
        }
        if (lambda - lambda_prev).abs() <= SPECTRAL_REL_TOL * lambda {
            return Ok(lambda);
        }
        lambda_prev = lambda;
        core::mem::swap(&mut v, &mut w);
    }
    Err(Error::NoConvergence {
        iterations: SPECTRAL_MAX_ITERS,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
