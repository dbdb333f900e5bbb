//! Uniform asymmetric quantization.
//!
//! `Q(x) = clamp(round(x / delta) + zero_point, 0, 2^b - 1)` with
//! round-half-to-even, and the affine inverse `delta * (q - zero_point)`.
//! Zero points are integers inside the code range so the dequantized grid
//! is exact.
//!
//! Groups: [`Granularity::PerTensor`] has one group;
//! [`Granularity::PerOutputChannel`] has one group per *column* of the
//! matrix. For a weight laid out `d_in x d_out` the columns are the output
//! channels; for an activation laid out `tokens x channels` the columns are
//! the channels themselves.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SqError};
use crate::scalar::Scalar;

/// Lower bound on the step size, used for constant (zero-width) groups.
pub const DELTA_FLOOR: f64 = 1e-8;

/// Highest supported bit width; codes are stored as `u8`.
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

impl Granularity {
    pub fn group_count(self, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerOutputChannel => cols,
        }
    }
}

/// Step sizes and zero points for one quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    bits: u8,
    delta: Vec<f64>,
    zero_point: Vec<i32>,
    granularity: Granularity,
}

impl QuantParams {
    pub fn new(
        bits: u8,
        delta: Vec<f64>,
        zero_point: Vec<i32>,
        granularity: Granularity,
    ) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(SqError::InvalidParams(format!(
                "bit width {bits} outside 2..={MAX_BITS}"
            )));
        }
        if delta.is_empty() || delta.len() != zero_point.len() {
            return Err(SqError::InvalidParams(format!(
                "{} step sizes vs {} zero points",
                delta.len(),
                zero_point.len()
            )));
        }
        if granularity == Granularity::PerTensor && delta.len() != 1 {
            return Err(SqError::InvalidParams(
                "per-tensor params must have exactly one group".into(),
            ));
        }
        if let Some(d) = delta.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(SqError::InvalidParams(format!("step size {d} is not positive")));
        }
        let qmax = (1i32 << bits) - 1;
        if let Some(z) = zero_point.iter().find(|z| !(0..=qmax).contains(*z)) {
            return Err(SqError::InvalidParams(format!(
                "zero point {z} outside [0, {qmax}]"
            )));
        }
        Ok(Self {
            bits,
            delta,
            zero_point,
            granularity,
        })
    }

    pub fn per_tensor(bits: u8, delta: f64, zero_point: i32) -> Result<Self> {
        Self::new(bits, vec![delta], vec![zero_point], Granularity::PerTensor)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn zero_point(&self) -> &[i32] {
        &self.zero_point
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn groups(&self) -> usize {
        self.delta.len()
    }

    /// Largest code, `2^b - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Representable interval `[delta * (0 - zp), delta * (qmax - zp)]` of a group.
    pub fn range(&self, group: usize) -> (f64, f64) {
        let d = self.delta[group];
        let z = self.zero_point[group] as f64;
        (d * (0.0 - z), d * (self.qmax() as f64 - z))
    }

    #[inline]
    fn group_of(&self, col: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerOutputChannel => col,
        }
    }

    pub(crate) fn check_cols(&self, cols: usize) -> Result<()> {
        let want = self.granularity.group_count(cols);
        if want != self.groups() {
            return Err(SqError::shape(format!(
                "{:?} params have {} groups but tensor has {cols} columns",
                self.granularity,
                self.groups()
            )));
        }
        Ok(())
    }

    #[inline]
    fn code(&self, x: f64, group: usize) -> u8 {
        let q = (x / self.delta[group]).round_ties_even() + self.zero_point[group] as f64;
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    #[inline]
    fn value(&self, code: u8, group: usize) -> f64 {
        self.delta[group] * (code as i32 - self.zero_point[group]) as f64
    }

    /// Returns a copy with the step sizes replaced; zero points are kept.
    pub fn with_delta(&self, delta: Vec<f64>) -> Result<Self> {
        Self::new(self.bits, delta, self.zero_point.clone(), self.granularity)
    }
}

/// Integer codes plus the parameters needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Array2<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(codes: Array2<u8>, params: QuantParams) -> Result<Self> {
        params.check_cols(codes.ncols())?;
        let qmax = params.qmax();
        if codes.iter().any(|&c| c as i32 > qmax) {
            return Err(SqError::InvalidParams(format!("code above {qmax}")));
        }
        Ok(Self { codes, params })
    }

    pub fn codes(&self) -> &Array2<u8> {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn into_parts(self) -> (Array2<u8>, QuantParams) {
        (self.codes, self.params)
    }
}

fn check_finite<T: Scalar>(x: &ArrayView2<'_, T>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SqError::NonFiniteInput)
    }
}

pub fn quantize<T: Scalar>(x: ArrayView2<'_, T>, p: &QuantParams) -> Result<QuantizedTensor> {
    check_finite(&x)?;
    p.check_cols(x.ncols())?;
    let codes = Array2::from_shape_fn(x.dim(), |(i, j)| p.code(x[[i, j]].as_f64(), p.group_of(j)));
    Ok(QuantizedTensor {
        codes,
        params: p.clone(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Array2<f64> {
    dequantize_as(q)
}

/// Dequantize into model precision. The affine map is evaluated in `f64`.
pub fn dequantize_as<T: Scalar>(q: &QuantizedTensor) -> Array2<T> {
    let p = &q.params;
    Array2::from_shape_fn(q.codes.dim(), |(i, j)| {
        T::of_f64(p.value(q.codes[[i, j]], p.group_of(j)))
    })
}

pub fn fake_quantize<T: Scalar>(x: ArrayView2<'_, T>, p: &QuantParams) -> Result<Array2<T>> {
    Ok(dequantize_as(&quantize(x, p)?))
}

pub fn quant_error_mse<T: Scalar>(x: ArrayView2<'_, T>, p: &QuantParams) -> Result<f64> {
    let fq = fake_quantize(x, p)?;
    Ok(mse(x, fq.view()))
}

pub(crate) fn mse<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Step size and zero point covering `[lo, hi]` (widened to include 0).
fn params_for_range(lo: f64, hi: f64, bits: u8) -> (f64, i32) {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let qmax = ((1u32 << bits) - 1) as f64;
    let delta = ((hi - lo) / qmax).max(DELTA_FLOOR);
    let zp = (-lo / delta).round_ties_even().clamp(0.0, qmax);
    (delta, zp as i32)
}

/// Per-group (min, max) of `x` in `f64`.
fn group_ranges<T: Scalar>(x: &ArrayView2<'_, T>, g: Granularity) -> Vec<(f64, f64)> {
    let fold = |it: &mut dyn Iterator<Item = &T>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        })
    };
    match g {
        Granularity::PerTensor => vec![fold(&mut x.iter())],
        Granularity::PerOutputChannel => x
            .axis_iter(Axis(1))
            .map(|col| fold(&mut col.iter()))
            .collect(),
    }
}

fn validate_fit_input<T: Scalar>(x: &ArrayView2<'_, T>, bits: u8) -> Result<()> {
    check_finite(x)?;
    if x.is_empty() {
        return Err(SqError::EmptyBatch);
    }
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(SqError::InvalidParams(format!(
            "bit width {bits} outside 2..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// Min-max range fit. The range is widened to contain zero so the zero point
/// is always a valid code; a group whose widened range is empty gets the
/// [`DELTA_FLOOR`] step.
pub fn fit_minmax<T: Scalar>(x: ArrayView2<'_, T>, bits: u8, g: Granularity) -> Result<QuantParams> {
    validate_fit_input(&x, bits)?;
    let (delta, zp) = group_ranges(&x, g)
        .into_iter()
        .map(|(lo, hi)| params_for_range(lo, hi, bits))
        .unzip();
    QuantParams::new(bits, delta, zp, g)
}

/// Outcome of the clipping search for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipChoice {
    pub shrink: f64,
    pub mse: f64,
}

/// Shrink factors `1.00, 0.99, ..., 0.01`.
pub fn default_shrink_grid() -> Vec<f64> {
    (0..100).map(|i| (100 - i) as f64 / 100.0).collect()
}

/// Clipping-range grid search. For every group and every shrink factor `s`
/// the min-max range is scaled by `s`; the candidate with the lowest
/// fake-quantization MSE over the group wins, ties going to the larger `s`.
pub fn fit_mse_search<T: Scalar>(
    x: ArrayView2<'_, T>,
    bits: u8,
    g: Granularity,
    shrink_grid: &[f64],
) -> Result<QuantParams> {
    search_clipping(x, bits, g, shrink_grid).map(|(p, _)| p)
}

/// [`fit_mse_search`] that also reports the chosen shrink factor per group.
pub fn search_clipping<T: Scalar>(
    x: ArrayView2<'_, T>,
    bits: u8,
    g: Granularity,
    shrink_grid: &[f64],
) -> Result<(QuantParams, Vec<ClipChoice>)> {
    validate_fit_input(&x, bits)?;
    if shrink_grid.is_empty() {
        return Err(SqError::InvalidParams("empty shrink grid".into()));
    }
    if let Some(s) = shrink_grid.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(SqError::InvalidParams(format!("shrink factor {s} outside (0, 1]")));
    }
    let qmax = ((1u32 << bits) - 1) as f64;
    let ranges = group_ranges(&x, g);
    let group_values: Vec<Vec<f64>> = match g {
        Granularity::PerTensor => vec![x.iter().map(|v| v.as_f64()).collect()],
        Granularity::PerOutputChannel => x
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|v| v.as_f64()).collect())
            .collect(),
    };

    let mut deltas = Vec::with_capacity(ranges.len());
    let mut zps = Vec::with_capacity(ranges.len());
    let mut choices = Vec::with_capacity(ranges.len());
    for ((lo, hi), values) in ranges.into_iter().zip(&group_values) {
        let mut best: Option<(ClipChoice, f64, i32)> = None;
        for &s in shrink_grid {
            let (delta, zp) = params_for_range(s * lo, s * hi, bits);
            let err = values
                .iter()
                .map(|&v| {
                    let q = ((v / delta).round_ties_even() + zp as f64).clamp(0.0, qmax);
                    let d = v - delta * (q - zp as f64);
                    d * d
                })
                .sum::<f64>()
                / values.len() as f64;
            let better = match &best {
                None => true,
                Some((c, _, _)) => err < c.mse || (err == c.mse && s > c.shrink),
            };
            if better {
                best = Some((ClipChoice { shrink: s, mse: err }, delta, zp));
            }
        }
        let (choice, delta, zp) = best.expect("grid is nonempty");
        deltas.push(delta);
        zps.push(zp);
        choices.push(choice);
    }
    Ok((QuantParams::new(bits, deltas, zps, g)?, choices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    fn p8() -> QuantParams {
        QuantParams::per_tensor(8, 1.0, 0).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(row(&[0.0]).view(), &p8()).unwrap().codes()[[0, 0]], 0);
        let q = quantize(row(&[2.4, 2.6]).view(), &p8()).unwrap();
        assert_eq!(q.codes().as_slice().unwrap(), &[2, 3]);
        assert_eq!(quantize(row(&[300.0]).view(), &p8()).unwrap().codes()[[0, 0]], 255);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert!(matches!(
            quantize(row(&[f64::NAN]).view(), &p8()),
            Err(SqError::NonFiniteInput)
        ));
        assert!(matches!(
            quantize(row(&[f64::INFINITY]).view(), &p8()),
            Err(SqError::NonFiniteInput)
        ));
        assert!(matches!(
            QuantParams::per_tensor(8, 0.0, 0),
            Err(SqError::InvalidParams(_))
        ));
        assert!(matches!(
            QuantParams::per_tensor(8, -1.0, 0),
            Err(SqError::InvalidParams(_))
        ));
    }

    #[test]
    fn ties_go_to_even() {
        let q = quantize(row(&[0.5, 1.5, 2.5, -0.5]).view(), &QuantParams::per_tensor(8, 1.0, 4).unwrap())
            .unwrap();
        assert_eq!(q.codes().as_slice().unwrap(), &[4, 6, 6, 4]);
    }

    #[test]
    fn dequantize_examples() {
        let deq = |code: u8, d: f64, z: i32| {
            let p = QuantParams::per_tensor(8, d, z).unwrap();
            dequantize(&QuantizedTensor::new(array![[code]], p).unwrap())[[0, 0]]
        };
        assert_eq!(deq(0, 1.0, 0), 0.0);
        assert_eq!(deq(255, 0.5, 0), 127.5);
        assert_eq!(deq(5, 2.0, 3), 4.0);
    }

    #[test]
    fn codes_above_range_are_rejected() {
        let p = QuantParams::per_tensor(4, 1.0, 0).unwrap();
        assert!(QuantizedTensor::new(array![[16u8]], p).is_err());
    }

    #[test]
    fn fake_quantize_examples() {
        let p = QuantParams::per_tensor(8, 0.25, 10).unwrap();
        let on_grid = row(&[0.25 * (0.0 - 10.0), 0.25 * (100.0 - 10.0), 0.0, 0.25 * 245.0]);
        assert_eq!(fake_quantize(on_grid.view(), &p).unwrap(), on_grid);
        assert_eq!(fake_quantize(row(&[2.4]).view(), &p8()).unwrap()[[0, 0]], 2.0);
        let p4 = QuantParams::per_tensor(4, 1.0, 0).unwrap();
        assert_eq!(fake_quantize(row(&[-10.0]).view(), &p4).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn fit_minmax_examples() {
        let x = row(&(0..=255).map(|v| v as f64).collect::<Vec<_>>());
        let p = fit_minmax(x.view(), 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.delta(), &[1.0]);
        assert_eq!(p.zero_point(), &[0]);

        let x = row(&[-1.0, 0.3, 1.0]);
        let p = fit_minmax(x.view(), 2, Granularity::PerTensor).unwrap();
        assert_relative_eq!(p.delta()[0], 2.0 / 3.0, max_relative = 1e-15);
        assert_eq!(p.zero_point(), &[2]);
        // both endpoints within half a step of the grid
        let (lo, hi) = p.range(0);
        assert!((lo - -1.0).abs() <= p.delta()[0] / 2.0 + 1e-12);
        assert!((hi - 1.0).abs() <= p.delta()[0] / 2.0 + 1e-12);
    }

    #[test]
    fn fit_minmax_constant_groups() {
        let zeros = Array2::<f64>::zeros((3, 4));
        let p = fit_minmax(zeros.view(), 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.delta(), &[DELTA_FLOOR]);
        assert_eq!(fake_quantize(zeros.view(), &p).unwrap(), zeros);

        for c in [-3.7, 0.001, 42.0] {
            let x = Array2::from_elem((2, 2), c);
            let p = fit_minmax(x.view(), 8, Granularity::PerTensor).unwrap();
            let fq = fake_quantize(x.view(), &p).unwrap();
            for v in fq.iter() {
                assert_relative_eq!(*v, c, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn fit_minmax_per_channel_groups_are_columns() {
        let x = array![[0.0, -2.0], [1.0, 2.0]];
        let p = fit_minmax(x.view(), 8, Granularity::PerOutputChannel).unwrap();
        assert_eq!(p.groups(), 2);
        assert_relative_eq!(p.delta()[0], 1.0 / 255.0);
        assert_relative_eq!(p.delta()[1], 4.0 / 255.0);
    }

    #[test]
    fn mse_search_single_candidate_is_minmax() {
        let x = array![[0.1, -0.7, 0.4], [0.9, -0.2, 0.05]];
        for g in [Granularity::PerTensor, Granularity::PerOutputChannel] {
            let a = fit_minmax(x.view(), 4, g).unwrap();
            let b = fit_mse_search(x.view(), 4, g, &[1.0]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mse_search_constant_prefers_full_range() {
        let x = Array2::from_elem((4, 4), 0.0);
        let (_, c) = search_clipping(x.view(), 4, Granularity::PerTensor, &[0.5, 1.0, 0.8]).unwrap();
        assert_eq!(c[0].shrink, 1.0);
        let x = Array2::from_elem((4, 4), 2.5);
        let (_, c) =
            search_clipping(x.view(), 4, Granularity::PerTensor, &default_shrink_grid()).unwrap();
        assert_eq!(c[0].shrink, 1.0);
    }

    #[test]
    fn mse_search_rejects_bad_grid() {
        let x = array![[1.0]];
        assert!(fit_mse_search(x.view(), 4, Granularity::PerTensor, &[]).is_err());
        assert!(fit_mse_search(x.view(), 4, Granularity::PerTensor, &[1.5]).is_err());
        assert!(fit_mse_search(x.view(), 4, Granularity::PerTensor, &[0.0]).is_err());
    }

    #[test]
    fn quant_error_examples() {
        let p = QuantParams::per_tensor(8, 0.5, 3).unwrap();
        let on_grid = row(&[0.0, 0.5, -1.5, 10.0]);
        assert_eq!(quant_error_mse(on_grid.view(), &p).unwrap(), 0.0);
        assert_eq!(quant_error_mse(row(&[0.5]).view(), &p8()).unwrap(), 0.25);
    }

    #[test]
    fn f32_fake_quantize_is_idempotent() {
        let x: Array2<f32> = array![[0.13, -2.2, 7.9], [3.3, 0.0, -0.01]];
        let p = fit_minmax(x.view(), 4, Granularity::PerOutputChannel).unwrap();
        let once = fake_quantize(x.view(), &p).unwrap();
        assert_eq!(fake_quantize(once.view(), &p).unwrap(), once);
    }

    fn params_strategy() -> impl Strategy<Value = QuantParams> {
        (2u8..=8, 1e-4f64..10.0, 0.0f64..1.0).prop_map(|(b, d, zf)| {
            let qmax = (1i32 << b) - 1;
            QuantParams::per_tensor(b, d, (zf * qmax as f64) as i32).unwrap()
        })
    }

    proptest! {
        #[test]
        fn codes_always_in_range(p in params_strategy(), xs in prop::collection::vec(-1e30f64..1e30, 1..32)) {
            let q = quantize(row(&xs).view(), &p).unwrap();
            prop_assert!(q.codes().iter().all(|&c| (c as i32) <= p.qmax()));
        }

        #[test]
        fn fake_quantize_is_projection(p in params_strategy(), xs in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let x = row(&xs);
            let once = fake_quantize(x.view(), &p).unwrap();
            let twice = fake_quantize(once.view(), &p).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn quantize_is_monotone(p in params_strategy(), mut xs in prop::collection::vec(-1e3f64..1e3, 2..32)) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = quantize(row(&xs).view(), &p).unwrap();
            let c = q.codes().as_slice().unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn in_range_error_within_half_step(p in params_strategy(), fr in prop::collection::vec(0.0f64..=1.0, 1..32)) {
            let (lo, hi) = p.range(0);
            let xs: Vec<f64> = fr.iter().map(|f| lo + f * (hi - lo)).collect();
            let x = row(&xs);
            let fq = fake_quantize(x.view(), &p).unwrap();
            let d = p.delta()[0];
            for (a, b) in x.iter().zip(fq.iter()) {
                prop_assert!((a - b).abs() <= d / 2.0 + 4.0 * f64::EPSILON * hi.abs().max(lo.abs()));
            }
            prop_assert!(quant_error_mse(x.view(), &p).unwrap() <= (d / 2.0).powi(2) * (1.0 + 1e-9));
        }
    }
}
