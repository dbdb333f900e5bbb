//! Channel-wise salience balancing.
//!
//! Salience of a channel is its maximal absolute value. For an activation
//! `X` (`tokens x d_in`) channel `j` is column `j`; for a weight `W`
//! (`d_in x d_out`) channel `j` is row `j`, i.e. the *input* channel the
//! weight row multiplies. Balancing rescales column `j` of `X` by `bx[j]`
//! and row `j` of `W` by `bw[j] = 1 / bx[j]`, so that both end up with the
//! geometric mean of the two original saliences.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Result, SqError};
use crate::scalar::Scalar;

/// Floor applied to saliences before they are divided by.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Nonnegative per-input-channel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceVector(Vec<f64>);

impl SalienceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SqError::InvalidParams(format!("salience {v} is not a nonnegative number")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Diagonals of the activation-side and weight-side balancing matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingPair {
    bx: Vec<f64>,
    bw: Vec<f64>,
}

impl BalancingPair {
    /// Builds a pair from explicit factors. Both must be positive and finite;
    /// the mutual-inverse relation is *not* enforced here so that corrupted
    /// pairs can be constructed for negative controls. See [`Self::max_inverse_error`].
    pub fn from_factors(bx: Vec<f64>, bw: Vec<f64>) -> Result<Self> {
        if bx.len() != bw.len() {
            return Err(SqError::LengthMismatch {
                left: bx.len(),
                right: bw.len(),
            });
        }
        if bx.iter().chain(&bw).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SqError::InvalidParams("balancing factors must be positive and finite".into()));
        }
        Ok(Self { bx, bw })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            bx: vec![1.0; d],
            bw: vec![1.0; d],
        }
    }

    pub fn bx(&self) -> &[f64] {
        &self.bx
    }

    pub fn bw(&self) -> &[f64] {
        &self.bw
    }

    pub fn len(&self) -> usize {
        self.bx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bx.is_empty()
    }

    /// The pair that undoes this one (`bx` and `bw` swapped).
    pub fn inverse(&self) -> Self {
        Self {
            bx: self.bw.clone(),
            bw: self.bx.clone(),
        }
    }

    /// `max_j |bx[j] * bw[j] - 1|`.
    pub fn max_inverse_error(&self) -> f64 {
        self.bx
            .iter()
            .zip(&self.bw)
            .map(|(a, b)| (a * b - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_len(&self, d: usize, what: &str) -> Result<()> {
        if self.len() != d {
            return Err(SqError::shape(format!(
                "balancing pair has {} channels, {what} has {d}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Max |x| per column, pooled over every sample and token in the batch.
pub fn activation_salience<T: Scalar>(batch: &[ArrayView2<'_, T>]) -> Result<SalienceVector> {
    let first = batch.first().ok_or(SqError::EmptyBatch)?;
    let d = first.ncols();
    let mut out = vec![0.0f64; d];
    for x in batch {
        if x.ncols() != d {
            return Err(SqError::shape(format!(
                "activation has {} channels, expected {d}",
                x.ncols()
            )));
        }
        for row in x.rows() {
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o = o.max(v.as_f64().abs());
            }
        }
    }
    Ok(SalienceVector(out))
}

/// Max |w| per row (input channel) of a `d_in x d_out` weight.
pub fn weight_salience<T: Scalar>(w: ArrayView2<'_, T>) -> SalienceVector {
    SalienceVector(
        w.axis_iter(Axis(0))
            .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())))
            .collect(),
    )
}

pub fn balanced_salience(sx: &SalienceVector, sw: &SalienceVector) -> Result<SalienceVector> {
    check_same_len(sx, sw)?;
    Ok(SalienceVector(
        sx.0.iter().zip(&sw.0).map(|(a, b)| (a * b).sqrt()).collect(),
    ))
}

fn check_same_len(a: &SalienceVector, b: &SalienceVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(SqError::shape(format!(
            "salience vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `bx[j] = g / sx[j]`, `bw[j] = g / sw[j]` with `g = sqrt(sx[j] * sw[j])`,
/// after flooring both saliences at `eps`.
pub fn build_balancing(sx: &SalienceVector, sw: &SalienceVector, eps: f64) -> Result<BalancingPair> {
    check_same_len(sx, sw)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SqError::InvalidParams(format!("eps {eps} must be positive")));
    }
    let (bx, bw) = sx
        .0
        .iter()
        .zip(&sw.0)
        .map(|(&a, &b)| {
            let a = a.max(eps);
            let b = b.max(eps);
            let g = (a * b).sqrt();
            (g / a, g / b)
        })
        .unzip();
    Ok(BalancingPair { bx, bw })
}

/// Scales columns of `x` by `bx` and rows of `w` by `bw`.
pub fn apply_balancing<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    pair: &BalancingPair,
) -> Result<(Array2<T>, Array2<T>)> {
    pair.check_len(x.ncols(), "activation")?;
    pair.check_len(w.nrows(), "weight")?;
    Ok((scale_columns(x, &pair.bx), scale_rows(w, &pair.bw)))
}

pub(crate) fn scale_columns<T: Scalar>(x: ArrayView2<'_, T>, s: &[f64]) -> Array2<T> {
    let mut out = x.to_owned();
    for (mut col, &f) in out.axis_iter_mut(Axis(1)).zip(s) {
        let f = T::of_f64(f);
        col.mapv_inplace(|v| v * f);
    }
    out
}

pub(crate) fn scale_rows<T: Scalar>(x: ArrayView2<'_, T>, s: &[f64]) -> Array2<T> {
    let mut out = x.to_owned();
    for (mut row, &f) in out.axis_iter_mut(Axis(0)).zip(s) {
        let f = T::of_f64(f);
        row.mapv_inplace(|v| v * f);
    }
    out
}

/// Largest channel salience.
pub fn overall_salience(s: &SalienceVector) -> Result<f64> {
    if s.is_empty() {
        return Err(SqError::EmptyVector);
    }
    Ok(s.0.iter().copied().fold(0.0, f64::max))
}
