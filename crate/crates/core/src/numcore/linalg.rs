use std::ops::Deref;

use crate::error::{invalid, Result};
use crate::Scalar;

/// Operands with a norm below this threshold make [`cosine`] return zero.
pub const COSINE_ZERO_NORM: f64 = 1e-12;

/// Fixed-length vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> DenseVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    /// Wraps `values`, rejecting non-finite entries.
    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite vector entry at index {i}")));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }
}

impl<T> Deref for DenseVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.values
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("matrix shape {rows}x{cols} has a zero dimension")));
        }
        if values.len() != rows * cols {
            return Err(invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite matrix entry at flat index {i}")));
        }
        Ok(Self { rows, cols, values })
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

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    pub fn fill(&mut self, v: T) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `out = A x`, restricted to the column range `[col0, col0 + x.len())`.
    pub fn matvec_cols_into(&self, col0: usize, x: &[T], out: &mut [T]) {
        debug_assert!(col0 + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.values[r * self.cols + col0..r * self.cols + col0 + x.len()];
            *o = dot(row, x);
        }
    }

    /// `A x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.matvec_cols_into(0, x, &mut out);
        out
    }

    /// `out += Aᵀ y`, writing into the column range `[col0, col0 + out.len())`.
    pub fn matvec_t_cols_acc(&self, col0: usize, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            let row = &self.values[r * self.cols + col0..r * self.cols + col0 + out.len()];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
    }

    /// `Aᵀ y`.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.matvec_t_cols_acc(0, y, &mut out);
        out
    }

    /// `A[:, col0..col0 + b.len()] += a bᵀ`.
    pub fn add_outer_cols(&mut self, col0: usize, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert!(col0 + b.len() <= self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == T::zero() {
                continue;
            }
            let row = &mut self.values[r * self.cols + col0..r * self.cols + col0 + b.len()];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }

    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        self.add_outer_cols(0, a, b);
    }

    /// Element-wise `A += v` for a column vector stored as `rows x 1`.
    pub fn add_assign_slice(&mut self, v: &[T]) {
        debug_assert_eq!(v.len(), self.values.len());
        for (x, &d) in self.values.iter_mut().zip(v) {
            *x += d;
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax computed in place; the caller guarantees a non-empty,
/// finite input.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn check_logits<T: Scalar>(logits: &[T]) -> Result<()> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<DenseVector<T>> {
    check_logits(logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(DenseVector::from_vec_unchecked(out))
}

/// `log softmax(logits)` via the log-sum-exp identity.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<DenseVector<T>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    Ok(DenseVector::from_vec_unchecked(
        logits.iter().map(|&x| x - lse).collect(),
    ))
}

/// Cosine similarity, clamped to `[-1, 1]`. Returns zero when either operand
/// has norm below [`COSINE_ZERO_NORM`].
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

#[inline]
pub(crate) fn cosine_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    let floor = T::lit(COSINE_ZERO_NORM);
    if na < floor || nb < floor {
        return T::zero();
    }
    // Dividing by the product (not sequentially) keeps the result symmetric.
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}
