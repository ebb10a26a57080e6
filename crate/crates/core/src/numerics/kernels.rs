//! Forward kernels and their analytic backward passes.
//!
//! Every `*_backward` returns the exact gradient of a scalar loss with
//! respect to the forward inputs, given the upstream gradient of the output.

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::ShapeMismatch { op, left, right }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Returns `(∂/∂a, ∂/∂b)` for `c = a · b`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if dc.shape() != (a.rows(), b.cols()) || a.cols() != b.rows() {
        return Err(mismatch("matmul_backward", a.shape(), b.shape()));
    }
    Ok((dc.matmul_t(b)?, a.t_matmul(dc)?))
}

/// Numerically stable softmax of every row.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    y
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if y.shape() != dy.shape() {
        return Err(mismatch("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        softmax_backward_row(y.row(r), dy.row(r), dx.row_mut(r));
    }
    Ok(dx)
}

pub(crate) fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((o, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *o = yi * (gi - dot);
    }
}

/// RMS normalisation of every row: `y = x / sqrt(mean(x²) + eps) ⊙ gain`.
///
/// Returns the output and the per-row reciprocal RMS for the backward pass.
pub fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], eps: T) -> Result<(Matrix<T>, Vec<T>)> {
    if gain.len() != x.cols() {
        return Err(mismatch("rms_norm", x.shape(), (1, gain.len())));
    }
    let width = T::of(x.cols() as f64);
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / width;
        let s = (ms + eps).sqrt().recip();
        inv.push(s);
        for ((o, &v), &g) in y.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * s * g;
        }
    }
    Ok((y, inv))
}

/// Returns `(∂/∂x, ∂/∂gain)` for [`rms_norm`].
pub fn rms_norm_backward<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    inv_rms: &[T],
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>)> {
    if x.shape() != dy.shape() || gain.len() != x.cols() || inv_rms.len() != x.rows() {
        return Err(mismatch("rms_norm_backward", x.shape(), dy.shape()));
    }
    let width = T::of(x.cols() as f64);
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dgain = vec![T::zero(); gain.len()];
    for r in 0..x.rows() {
        let (xr, gr) = (x.row(r), dy.row(r));
        let s = inv_rms[r];
        let mut dot = T::zero();
        for ((&xv, &g), &dv) in xr.iter().zip(gain).zip(gr) {
            dot += xv * g * dv;
        }
        let k = s * s * s * dot / width;
        for (((o, &xv), &g), &dv) in dx.row_mut(r).iter_mut().zip(xr).zip(gain).zip(gr) {
            *o = s * g * dv - xv * k;
        }
        for ((dg, &xv), &dv) in dgain.iter_mut().zip(xr).zip(gr) {
            *dg += dv * xv * s;
        }
    }
    Ok((dx, dgain))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `silu(x) = x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if x.shape() != dy.shape() {
        return Err(mismatch("silu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * silu_grad(v))
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Gathers rows of `table` for each id.
pub fn embedding<T: Scalar>(table: &Matrix<T>, ids: &[u32]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(ids.len(), table.cols());
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= table.rows() {
            return Err(Error::TokenOutOfRange {
                token: id,
                vocab: table.rows(),
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}

/// Scatter-adds `dy` rows into a `vocab × width` gradient table.
pub fn embedding_backward<T: Scalar>(ids: &[u32], dy: &Matrix<T>, vocab: usize) -> Result<Matrix<T>> {
    if ids.len() != dy.rows() {
        return Err(mismatch("embedding_backward", (ids.len(), 1), dy.shape()));
    }
    let mut table = Matrix::zeros(vocab, dy.cols());
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { token: id, vocab });
        }
        for (o, &g) in table.row_mut(id as usize).iter_mut().zip(dy.row(i)) {
            *o += g;
        }
    }
    Ok(table)
}

/// Mean cross-entropy of `logits` rows against `targets`, in nats.
///
/// Returns the loss and the row-softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<(T, Matrix<T>)> {
    if logits.rows() != targets.len() {
        return Err(mismatch("cross_entropy", logits.shape(), (targets.len(), 1)));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("cross_entropy targets"));
    }
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: logits.cols(),
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[t as usize];
        softmax_in_place(probs.row_mut(r));
    }
    Ok((total / T::of(targets.len() as f64), probs))
}

/// Gradient of the mean cross-entropy with respect to the logits, scaled by
/// the upstream gradient `dloss`.
pub fn cross_entropy_backward<T: Scalar>(probs: &Matrix<T>, targets: &[u32], dloss: T) -> Result<Matrix<T>> {
    if probs.rows() != targets.len() {
        return Err(mismatch("cross_entropy_backward", probs.shape(), (targets.len(), 1)));
    }
    let scale = dloss / T::of(targets.len() as f64);
    let mut d = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        d[(r, t as usize)] -= T::one();
        d.row_mut(r).iter_mut().for_each(|v| *v *= scale);
    }
    Ok(d)
}
