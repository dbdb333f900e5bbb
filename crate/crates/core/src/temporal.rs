//! Timestep-aware salience calibration.
//!
//! Each calibration timestep gets a weight from a softmax over the *negated*
//! Spearman rank correlation between that timestep's activation salience and
//! the weight salience: timesteps where large activation channels meet small
//! weight channels count the most. The weighted salience then feeds the usual
//! balancing construction.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, SqError};
use crate::salience::{
    activation_salience, build_balancing, overall_salience, weight_salience, BalancingPair,
    SalienceVector,
};
use crate::scalar::Scalar;

/// Activation batches of one layer, one entry per calibration timestep.
#[derive(Debug, Clone)]
pub struct TimestepActivations<T> {
    per_t: Vec<Vec<Array2<T>>>,
    timesteps: Vec<usize>,
}

impl<T: Scalar> TimestepActivations<T> {
    pub fn new(per_t: Vec<Vec<Array2<T>>>, timesteps: Vec<usize>) -> Result<Self> {
        if per_t.is_empty() {
            return Err(SqError::EmptyBatch);
        }
        if per_t.len() != timesteps.len() {
            return Err(SqError::LengthMismatch {
                left: per_t.len(),
                right: timesteps.len(),
            });
        }
        if !timesteps.windows(2).all(|w| w[0] < w[1]) {
            return Err(SqError::InvalidParams("timesteps must be strictly increasing".into()));
        }
        let d = per_t[0].first().ok_or(SqError::EmptyBatch)?.ncols();
        for batch in &per_t {
            if batch.is_empty() {
                return Err(SqError::EmptyBatch);
            }
            if let Some(x) = batch.iter().find(|x| x.ncols() != d) {
                return Err(SqError::shape(format!(
                    "activation has {} channels, expected {d}",
                    x.ncols()
                )));
            }
        }
        Ok(Self { per_t, timesteps })
    }

    pub fn len(&self) -> usize {
        self.per_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_t.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.per_t[0][0].ncols()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn batch(&self, t: usize) -> &[Array2<T>] {
        &self.per_t[t]
    }

    pub fn batches(&self) -> impl Iterator<Item = &[Array2<T>]> {
        self.per_t.iter().map(|b| b.as_slice())
    }

    /// Keeps only timestep index `t`.
    pub fn select(&self, t: usize) -> Self {
        Self {
            per_t: vec![self.per_t[t].clone()],
            timesteps: vec![self.timesteps[t]],
        }
    }

    /// All samples of all timesteps stacked row-wise.
    pub fn pooled(&self) -> Array2<T> {
        let views: Vec<ArrayView2<'_, T>> =
            self.per_t.iter().flatten().map(|x| x.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform channel count")
    }

    /// Per-timestep activation salience, pooled over that timestep's samples.
    pub fn saliences(&self) -> Vec<SalienceVector> {
        self.per_t
            .iter()
            .map(|b| {
                let views: Vec<_> = b.iter().map(|x| x.view()).collect();
                activation_salience(&views).expect("validated at construction")
            })
            .collect()
    }
}

/// Softmax(-rho) weights over timesteps together with the correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpearmanWeights {
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Average (fractional) ranks, 1-based; tied values share the mean of their span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks. Zero when either
/// input has no rank variance.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SqError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(SqError::TooShort(a.len()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Softmax of `-rho` with max-subtraction.
pub fn softmax_neg(rho: &[f64]) -> Vec<f64> {
    let m = rho.iter().map(|r| -r).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rho.iter().map(|r| (-r - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn eta_weights(saliences: &[SalienceVector], sw: &SalienceVector) -> Result<SpearmanWeights> {
    if saliences.is_empty() {
        return Err(SqError::EmptyBatch);
    }
    let rho = saliences
        .iter()
        .map(|s| {
            if s.len() != sw.len() {
                return Err(SqError::shape(format!(
                    "activation salience of length {} vs weight salience {}",
                    s.len(),
                    sw.len()
                )));
            }
            // a single channel carries no ordering
            if s.len() < 2 {
                return Ok(0.0);
            }
            spearman_rho(s.values(), sw.values())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpearmanWeights {
        eta: softmax_neg(&rho),
        rho,
    })
}

/// `out[j] = sum_t eta[t] * saliences[t][j]`, clamped into
/// `[min_t, max_t]` of channel `j` so the result is a convex combination even
/// after rounding.
pub fn temporal_salience(saliences: &[SalienceVector], w: &SpearmanWeights) -> Result<SalienceVector> {
    if saliences.is_empty() {
        return Err(SqError::EmptyBatch);
    }
    if saliences.len() != w.eta.len() {
        return Err(SqError::LengthMismatch {
            left: saliences.len(),
            right: w.eta.len(),
        });
    }
    let d = saliences[0].len();
    if let Some(s) = saliences.iter().find(|s| s.len() != d) {
        return Err(SqError::shape(format!("salience of length {} vs {d}", s.len())));
    }
    let out = (0..d)
        .map(|j| {
            let (mut acc, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            for (s, e) in saliences.iter().zip(&w.eta) {
                let v = s.values()[j];
                acc += e * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            acc.clamp(lo, hi)
        })
        .collect();
    Ok(SalienceVector::from_unchecked(out))
}

/// Everything computed while calibrating one layer.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub pair: BalancingPair,
    pub weights: SpearmanWeights,
    pub diagnostics: CalibrationDiagnostics,
}

#[derive(Debug, Clone)]
pub struct CalibrationDiagnostics {
    pub timesteps: Vec<usize>,
    pub per_t_salience: Vec<SalienceVector>,
    pub weight_salience: SalienceVector,
    pub temporal_salience: SalienceVector,
    /// `max(s_o(X), s_o(W))` over the pooled calibration activations.
    pub so_pre: f64,
    /// Same after balancing.
    pub so_post: f64,
}

/// Per-timestep salience, softmax(-rho) weighting, temporal salience, then
/// balancing against the weight salience.
pub fn calibrate_layer<T: Scalar>(
    acts: &TimestepActivations<T>,
    w: ArrayView2<'_, T>,
    eps: f64,
) -> Result<LayerCalibration> {
    if w.nrows() != acts.channels() {
        return Err(SqError::shape(format!(
            "weight has {} input channels, activations have {}",
            w.nrows(),
            acts.channels()
        )));
    }
    let per_t = acts.saliences();
    let sw = weight_salience(w);
    let weights = eta_weights(&per_t, &sw)?;
    let s_rho = temporal_salience(&per_t, &weights)?;
    let pair = build_balancing(&s_rho, &sw, eps)?;

    let pooled: Vec<f64> = (0..acts.channels())
        .map(|j| per_t.iter().map(|s| s.values()[j]).fold(0.0, f64::max))
        .collect();
    let so_pre = overall_salience(&SalienceVector::from_unchecked(pooled.clone()))?
        .max(overall_salience(&sw)?);
    let so_post = pooled
        .iter()
        .zip(pair.bx())
        .map(|(s, b)| s * b)
        .chain(sw.values().iter().zip(pair.bw()).map(|(s, b)| s * b))
        .fold(0.0, f64::max);

    Ok(LayerCalibration {
        pair,
        weights,
        diagnostics: CalibrationDiagnostics {
            timesteps: acts.timesteps().to_vec(),
            per_t_salience: per_t,
            weight_salience: sw,
            temporal_salience: s_rho,
            so_pre,
            so_post,
        },
    })
}
