//! Small dense linear algebra: a row-major matrix type, LU factorization with
//! partial pivoting and a conditioning guard, and complex Gaussian
//! elimination for the eigen-oracle and DMD eigenvector paths.
//!
//! Everything here targets the small matrices of this crate (K, M <= 16);
//! clarity and robustness over speed.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Reject linear solves whose largest/smallest pivot magnitude ratio exceeds
/// this. A blow-up of the basis inverse inside the loss must surface as an
/// error rather than as garbage gradients.
pub const PIVOT_RATIO_LIMIT: f64 = 1e12;

/// Dense row-major matrix of `f64`. Vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Column vector (`n x 1`).
    pub fn col(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// `1 x 1` matrix.
    pub fn scalar(x: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
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

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_col_vec(&self) -> bool {
        self.cols == 1
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| s * x)
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// a * b^T for column vectors a (m x 1), b (n x 1).
    pub fn outer(a: &Mat, b: &Mat) -> Mat {
        debug_assert!(a.is_col_vec() && b.is_col_vec());
        Mat::from_fn(a.rows, b.rows, |i, j| a.data[i] * b.data[j])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting of a square matrix.
///
/// The factorization keeps the pivot-magnitude ratio as a cheap conditioning
/// estimate; [`lu_factor`] rejects matrices whose ratio exceeds
/// [`PIVOT_RATIO_LIMIT`].
#[derive(Debug, Clone)]
pub struct LuFactors {
    /// Packed L (unit lower, below diagonal) and U (upper, on/above diagonal).
    lu: Mat,
    /// Row permutation: row `perm[i]` of the original matrix is row `i` of PA.
    perm: Vec<usize>,
    /// max |pivot| / min |pivot|.
    pub pivot_ratio: f64,
}

pub fn lu_factor(a: &Mat) -> Result<LuFactors> {
    let n = a.rows();
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "lu_factor",
            lhs: a.shape_string(),
            rhs: "square".into(),
        });
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut max_piv = 0.0_f64;
    let mut min_piv = f64::INFINITY;

    for k in 0..n {
        // Partial pivoting: largest magnitude in column k at or below row k.
        let mut p = k;
        let mut best = lu[(k, k)].abs();
        for i in (k + 1)..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if p != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
            perm.swap(k, p);
        }
        let pivot = lu[(k, k)];
        let mag = pivot.abs();
        max_piv = max_piv.max(mag);
        min_piv = min_piv.min(mag);
        if mag == 0.0 {
            return Err(Error::IllConditioned {
                ratio: f64::INFINITY,
                limit: PIVOT_RATIO_LIMIT,
            });
        }
        for i in (k + 1)..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            for j in (k + 1)..n {
                let sub = factor * lu[(k, j)];
                lu[(i, j)] -= sub;
            }
        }
    }

    let ratio = if n == 0 { 1.0 } else { max_piv / min_piv };
    if !ratio.is_finite() || ratio > PIVOT_RATIO_LIMIT {
        return Err(Error::IllConditioned {
            ratio,
            limit: PIVOT_RATIO_LIMIT,
        });
    }
    Ok(LuFactors {
        lu,
        perm,
        pivot_ratio: ratio,
    })
}

impl LuFactors {
    pub fn n(&self) -> usize {
        self.lu.rows()
    }

    /// Solve A x = b.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        debug_assert_eq!(b.len(), n);
        // Forward substitution with permuted rhs: L y = P b.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[self.perm[i]];
            for j in 0..i {
                s -= self.lu[(i, j)] * y[j];
            }
            y[i] = s;
        }
        // Back substitution: U x = y.
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    /// Solve A X = B column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col: Vec<f64> = b.column(j);
            let x = self.solve_vec(&col);
            for i in 0..b.rows() {
                out[(i, j)] = x[i];
            }
        }
        out
    }

    pub fn inverse(&self) -> Mat {
        self.solve_mat(&Mat::identity(self.n()))
    }

    /// Solve `A^T y = c` reusing the factors of `A`.
    ///
    /// With `P A = L U`: `A^T y = U^T L^T P y = c`, so forward-substitute
    /// through `U^T`, back-substitute through `L^T` (unit diagonal), then
    /// undo the permutation.
    pub fn solve_transposed_vec(&self, c: &[f64]) -> Vec<f64> {
        let n = self.n();
        debug_assert_eq!(c.len(), n);
        // U^T w = c (U^T is lower triangular).
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut s = c[i];
            for j in 0..i {
                s -= self.lu[(j, i)] * w[j];
            }
            w[i] = s / self.lu[(i, i)];
        }
        // L^T v = w (L^T is unit upper triangular).
        let mut v = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in (i + 1)..n {
                s -= self.lu[(j, i)] * v[j];
            }
            v[i] = s;
        }
        // y = P^T v.
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[self.perm[i]] = v[i];
        }
        y
    }
}

/// Complex dense matrix for the eigen oracle and DMD eigenvectors.
#[derive(Debug, Clone)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| self[(i, j)] * v[j])
                    .sum::<Complex64>()
            })
            .collect()
    }

    /// Solve A x = b by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.rows;
        if self.rows != self.cols || b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "complex_solve",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}", b.len()),
            });
        }
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let idx = |i: usize, j: usize| i * n + j;
        for k in 0..n {
            let mut p = k;
            let mut best = a[idx(k, k)].norm();
            for i in (k + 1)..n {
                let v = a[idx(i, k)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::IllConditioned {
                    ratio: f64::INFINITY,
                    limit: PIVOT_RATIO_LIMIT,
                });
            }
            if p != k {
                for j in 0..n {
                    a.swap(idx(k, j), idx(p, j));
                }
                x.swap(k, p);
            }
            let pivot = a[idx(k, k)];
            for i in (k + 1)..n {
                let factor = a[idx(i, k)] / pivot;
                a[idx(i, k)] = Complex64::new(0.0, 0.0);
                for j in (k + 1)..n {
                    let sub = factor * a[idx(k, j)];
                    a[idx(i, j)] -= sub;
                }
                let sub = factor * x[k];
                x[i] -= sub;
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= a[idx(i, j)] * x[j];
            }
            x[i] = s / a[idx(i, i)];
        }
        Ok(x)
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}
