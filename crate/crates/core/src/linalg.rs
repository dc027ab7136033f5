//! Small dense solves used by skill inference, probing and the oracle.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Row-major square matrix helper.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![T::zero(); n_rows * n_cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        Self {
            n_rows: rows.len(),
            n_cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n_cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n_cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.n_cols != rhs.n_rows {
            return Err(LinalgError::Dimension(format!(
                "{}x{} @ {}x{}",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let mut out = Self::zeros(self.n_rows, rhs.n_cols);
        for i in 0..self.n_rows {
            for k in 0..self.n_cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.n_cols {
                    out.data[i * rhs.n_cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        (0..self.n_rows)
            .map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect()
    }
}

/// Solve `a x = b` for `x` with `b` holding `k` right-hand-side columns.
///
/// Gaussian elimination with partial pivoting. A pivot whose magnitude is
/// below `n * eps * max|a|` is reported as singular.
pub fn solve<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = a.n_rows;
    if a.n_cols != n || b.n_rows != n {
        return Err(LinalgError::Dimension(format!(
            "solve {}x{} with rhs {}x{}",
            a.n_rows, a.n_cols, b.n_rows, b.n_cols
        )));
    }
    let k = b.n_cols;
    let mut m = a.data.clone();
    let mut x = b.data.clone();
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tol = scale * T::epsilon() * T::from_usize(n.max(1)).unwrap();
    for col in 0..n {
        let (piv_row, piv_val) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val <= tol || piv_val == T::zero() {
            return Err(LinalgError::Singular {
                column: col,
                pivot: piv_val.as_f64(),
            });
        }
        if piv_row != col {
            for j in 0..n {
                m.swap(col * n + j, piv_row * n + j);
            }
            for j in 0..k {
                x.swap(col * k + j, piv_row * k + j);
            }
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                let v = m[col * n + j];
                m[r * n + j] -= f * v;
            }
            for j in 0..k {
                let v = x[col * k + j];
                x[r * k + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let p = m[col * n + col];
        for j in 0..k {
            let mut acc = x[col * k + j];
            for c in col + 1..n {
                acc -= m[col * n + c] * x[c * k + j];
            }
            x[col * k + j] = acc / p;
        }
    }
    Ok(Matrix {
        n_rows: n,
        n_cols: k,
        data: x,
    })
}

pub fn inverse<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    solve(a, &Matrix::identity(a.n_rows))
}

/// Ridge regression `argmin_w ||X w - Y||^2 / n + eps ||w||^2` via the
/// normal equations. `x` is `n x p`, `y` is `n x q`; returns `p x q`.
pub fn ridge<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, eps: f64) -> Result<Matrix<T>, LinalgError> {
    if x.n_rows != y.n_rows || x.n_rows == 0 {
        return Err(LinalgError::Dimension(format!("ridge with {} vs {} rows", x.n_rows, y.n_rows)));
    }
    let (n, p, q) = (x.n_rows, x.n_cols, y.n_cols);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut gram = Matrix::zeros(p, p);
    let mut xty = Matrix::zeros(p, q);
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row(r);
        for i in 0..p {
            let xi = xr[i];
            for j in 0..p {
                gram.data[i * p + j] += xi * xr[j];
            }
            for j in 0..q {
                xty.data[i * q + j] += xi * yr[j];
            }
        }
    }
    let e = T::lit(eps);
    for v in gram.data.iter_mut() {
        *v *= inv_n;
    }
    for v in xty.data.iter_mut() {
        *v *= inv_n;
    }
    for i in 0..p {
        gram.data[i * p + i] += e;
    }
    solve(&gram, &xty)
}
