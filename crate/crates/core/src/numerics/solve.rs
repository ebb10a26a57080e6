use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `H = L·Lᵀ`.
///
/// Only the lower triangle of `h` is read.
pub fn cholesky<T: Scalar>(h: &Matrix<T>) -> Result<Matrix<T>> {
    let n = h.rows();
    if n != h.cols() || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: h.shape(),
            right: (n, n),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: d.f64(),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L·Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky_solve",
            left: l.shape(),
            right: (b.len(), 1),
        });
    }
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    Ok(y)
}

/// Solves `H x = b` for symmetric positive-definite `H`.
pub fn solve_spd<T: Scalar>(h: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if b.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "solve_spd",
            left: h.shape(),
            right: (b.len(), 1),
        });
    }
    cholesky_solve(&cholesky(h)?, b)
}
