//! Offline re-parameterization of balancing factors.
//!
//! `bw` is folded into the weight rows of the balanced linear layer. `bx` is
//! folded into whatever produces that layer's input:
//!
//! - after adaLN (QKV projection, FC1): the conditioning MLPs that regress
//!   `gamma` and `beta`, column-scaled by `bx`;
//! - after the attention matmul (output projection): the per-channel
//!   dequantization step sizes of the matmul operand, scaled by `bx`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SqError};
use crate::quant::{Granularity, QuantParams};
use crate::salience::{scale_columns, scale_rows, BalancingPair};
use crate::scalar::Scalar;

/// Variance epsilon of the affine-free LayerNorm inside adaLN.
pub const LN_EPS: f64 = 1e-6;

/// Linear conditioning MLPs regressing adaLN scale and shift:
/// `gamma = c . w_gamma + b_gamma`, `beta = c . w_beta + b_beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLNParams<T> {
    pub w_gamma: Array2<T>,
    pub w_beta: Array2<T>,
    pub b_gamma: Array1<T>,
    pub b_beta: Array1<T>,
}

impl<T: Scalar> AdaLNParams<T> {
    pub fn new(w_gamma: Array2<T>, w_beta: Array2<T>, b_gamma: Array1<T>, b_beta: Array1<T>) -> Result<Self> {
        let d = w_gamma.ncols();
        if w_beta.ncols() != d || b_gamma.len() != d || b_beta.len() != d {
            return Err(SqError::shape("adaLN weight columns and bias lengths must all match"));
        }
        if w_beta.nrows() != w_gamma.nrows() {
            return Err(SqError::shape("adaLN weights must share the conditioning dimension"));
        }
        Ok(Self {
            w_gamma,
            w_beta,
            b_gamma,
            b_beta,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_gamma.ncols()
    }

    pub fn d_cond(&self) -> usize {
        self.w_gamma.nrows()
    }

    /// `(gamma, beta)` for conditioning vector `c`.
    pub fn regress(&self, c: ArrayView1<'_, T>) -> Result<(Array1<T>, Array1<T>)> {
        if c.len() != self.d_cond() {
            return Err(SqError::shape(format!(
                "conditioning vector has length {}, MLPs expect {}",
                c.len(),
                self.d_cond()
            )));
        }
        Ok((
            c.dot(&self.w_gamma) + &self.b_gamma,
            c.dot(&self.w_beta) + &self.b_beta,
        ))
    }
}

/// Per-row LayerNorm without affine parameters.
pub fn layer_norm<T: Scalar>(z: ArrayView2<'_, T>) -> Array2<T> {
    let d = T::of_f64(z.ncols() as f64);
    let eps = T::of_f64(LN_EPS);
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// `LN(Z) * (1 + gamma) + beta`.
pub fn adaln_forward<T: Scalar>(z: ArrayView2<'_, T>, p: &AdaLNParams<T>, c: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if z.ncols() != p.d_in() {
        return Err(SqError::shape(format!("Z has {} channels, adaLN has {}", z.ncols(), p.d_in())));
    }
    let (gamma, beta) = p.regress(c)?;
    let scale = gamma.mapv(|g| T::one() + g);
    Ok(layer_norm(z) * &scale + &beta)
}

/// A linear layer with `bw` folded into its weight rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedLinear<T> {
    pub w_tilde: Array2<T>,
    pub bias: Array1<T>,
    /// The pair whose `bw` was folded in.
    pub provenance: BalancingPair,
}

pub fn fold_weight<T: Scalar>(w: ArrayView2<'_, T>, bias: ArrayView1<'_, T>, pair: &BalancingPair) -> Result<FoldedLinear<T>> {
    pair.check_len(w.nrows(), "weight")?;
    if bias.len() != w.ncols() {
        return Err(SqError::shape(format!(
            "bias has length {}, weight has {} outputs",
            bias.len(),
            w.ncols()
        )));
    }
    Ok(FoldedLinear {
        w_tilde: scale_rows(w, pair.bw()),
        bias: bias.to_owned(),
        provenance: pair.clone(),
    })
}

/// Column-scales both regression weights and biases by `bx`, so the folded
/// MLPs emit `(gamma * bx, beta * bx)` for every conditioning input.
pub fn fold_adaln<T: Scalar>(p: &AdaLNParams<T>, pair: &BalancingPair) -> Result<AdaLNParams<T>> {
    pair.check_len(p.d_in(), "adaLN")?;
    let bx = pair.bx();
    let scale_vec = |v: &Array1<T>| Array1::from_iter(v.iter().zip(bx).map(|(&a, &b)| a * T::of_f64(b)));
    Ok(AdaLNParams {
        w_gamma: scale_columns(p.w_gamma.view(), bx),
        w_beta: scale_columns(p.w_beta.view(), bx),
        b_gamma: scale_vec(&p.b_gamma),
        b_beta: scale_vec(&p.b_beta),
    })
}

/// `LN(Z) * (bx + gamma~) + beta~` with `(gamma~, beta~)` from the folded MLPs.
/// Equals `adaLN(Z) . diag(bx)` under the unfolded parameters.
pub fn balanced_adaln_forward<T: Scalar>(
    z: ArrayView2<'_, T>,
    p_folded: &AdaLNParams<T>,
    pair: &BalancingPair,
    c: ArrayView1<'_, T>,
) -> Result<Array2<T>> {
    pair.check_len(p_folded.d_in(), "adaLN")?;
    if z.ncols() != p_folded.d_in() {
        return Err(SqError::shape(format!(
            "Z has {} channels, adaLN has {}",
            z.ncols(),
            p_folded.d_in()
        )));
    }
    let (gamma, beta) = p_folded.regress(c)?;
    let scale = Array1::from_iter(gamma.iter().zip(pair.bx()).map(|(&g, &b)| T::of_f64(b) + g));
    Ok(layer_norm(z) * &scale + &beta)
}

/// Absorbs `bx` into per-channel dequantization step sizes of the operator
/// that feeds the balanced layer: `delta'[j] = delta[j] * bx[j]`.
pub fn fold_dequant_scales(p: &QuantParams, pair: &BalancingPair) -> Result<QuantParams> {
    if p.granularity() != Granularity::PerOutputChannel {
        return Err(SqError::GranularityMismatch(
            "per-tensor dequantization cannot absorb per-channel balancing factors".into(),
        ));
    }
    if p.groups() != pair.len() {
        return Err(SqError::GranularityMismatch(format!(
            "{} dequantization groups vs {} balancing channels",
            p.groups(),
            pair.len()
        )));
    }
    p.with_delta(p.delta().iter().zip(pair.bx()).map(|(d, b)| d * b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_rel_dev: f64,
    pub worst_index: usize,
    pub deviations: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative Frobenius deviation `||b - a|| / ||a||` (absolute when `a` is zero).
pub fn relative_deviation<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        num += (y - x) * (y - x);
        den += x * x;
    }
    if !num.is_finite() {
        return f64::INFINITY;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Runs both forwards on every input and reports the worst relative deviation.
/// A failed comparison is a result, not an error.
pub fn verify_equivalence<I, T, F, G>(original: F, folded: G, inputs: &[I], tol: f64) -> EquivalenceReport
where
    I: Sync,
    T: Scalar,
    F: Fn(&I) -> Array2<T> + Sync,
    G: Fn(&I) -> Array2<T> + Sync,
{
    let deviations: Vec<f64> = inputs
        .par_iter()
        .map(|x| relative_deviation(original(x).view(), folded(x).view()))
        .collect();
    let (worst_index, max_rel_dev) = deviations
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v > bv || v.is_nan() { (i, v) } else { (bi, bv) });
    EquivalenceReport {
        passed: max_rel_dev <= tol,
        max_rel_dev,
        worst_index,
        deviations,
        tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, QuantizedTensor};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_pair(rng: &mut ChaCha8Rng, d: usize) -> BalancingPair {
        let bx: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.gen_range(-1.0..1.0))).collect();
        let bw = bx.iter().map(|b| 1.0 / b).collect();
        BalancingPair::from_factors(bx, bw).unwrap()
    }

    fn rand_adaln(rng: &mut ChaCha8Rng, dc: usize, d: usize) -> AdaLNParams<f64> {
        AdaLNParams::new(
            rand_mat(rng, dc, d),
            rand_mat(rng, dc, d),
            Array1::from_iter((0..d).map(|_| rng.gen_range(-1.0..1.0))),
            Array1::from_iter((0..d).map(|_| rng.gen_range(-1.0..1.0))),
        )
        .unwrap()
    }

    #[test]
    fn fold_weight_examples() {
        let w = array![[1.0, -1.0], [0.5, 0.25]];
        let b = array![0.1, 0.2];
        let f = fold_weight(w.view(), b.view(), &BalancingPair::identity(2)).unwrap();
        assert_eq!(f.w_tilde, w);

        let pair = BalancingPair::from_factors(vec![0.5, 1.0], vec![2.0, 1.0]).unwrap();
        let f = fold_weight(w.view(), b.view(), &pair).unwrap();
        assert_eq!(f.w_tilde.row(0).to_vec(), vec![2.0, -2.0]);
        assert_eq!(f.bias, b);
        assert!(fold_weight(w.view(), b.view(), &BalancingPair::identity(3)).is_err());
    }

    #[test]
    fn fold_then_inverse_restores_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_mat(&mut rng, 8, 5);
        let pair = rand_pair(&mut rng, 8);
        let b = Array1::zeros(5);
        let f = fold_weight(w.view(), b.view(), &pair).unwrap();
        let back = fold_weight(f.w_tilde.view(), b.view(), &pair.inverse()).unwrap();
        assert!(relative_deviation(w.view(), back.w_tilde.view()) <= 1e-12);
    }

    #[test]
    fn folded_linear_preserves_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 6, 8).mapv(|v| v as f32);
        let w = rand_mat(&mut rng, 8, 4).mapv(|v| v as f32);
        let pair = rand_pair(&mut rng, 8);
        let f = fold_weight(w.view(), Array1::zeros(4).view(), &pair).unwrap();
        let xt = scale_columns(x.view(), pair.bx());
        assert!(relative_deviation(x.dot(&w).view(), xt.dot(&f.w_tilde).view()) < 1e-5);
    }

    #[test]
    fn fold_adaln_commutes_with_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_adaln(&mut rng, 6, 4);
        assert_eq!(fold_adaln(&p, &BalancingPair::identity(4)).unwrap(), p);
        let pair = rand_pair(&mut rng, 4);
        let folded = fold_adaln(&p, &pair).unwrap();
        let c = Array1::from_iter((0..6).map(|_| rng.gen_range(-2.0..2.0)));
        let (g, b) = p.regress(c.view()).unwrap();
        let (gt, bt) = folded.regress(c.view()).unwrap();
        let bx = Array1::from(pair.bx().to_vec());
        let gs = (&g * &bx).insert_axis(Axis(0));
        let bs = (&b * &bx).insert_axis(Axis(0));
        assert!(relative_deviation(gs.view(), gt.insert_axis(Axis(0)).view()) <= 1e-12);
        assert!(relative_deviation(bs.view(), bt.insert_axis(Axis(0)).view()) <= 1e-12);
    }

    #[test]
    fn balanced_adaln_examples() {
        let z = array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let zero = AdaLNParams::new(
            Array2::zeros((2, 4)),
            Array2::zeros((2, 4)),
            Array1::zeros(4),
            Array1::zeros(4),
        )
        .unwrap();
        let c = array![0.3, -0.2];
        let out = balanced_adaln_forward(z.view(), &zero, &BalancingPair::identity(4), c.view()).unwrap();
        assert_eq!(out, layer_norm(z.view()));
        // constant row normalizes to zero, leaving only the shift
        assert!(out.row(1).iter().all(|v| *v == 0.0));

        let mut shifted = zero.clone();
        shifted.b_beta = array![1.0, -2.0, 0.5, 0.0];
        let out = balanced_adaln_forward(z.view(), &shifted, &BalancingPair::identity(4), c.view()).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![1.0, -2.0, 0.5, 0.0]);
    }

    #[test]
    fn balanced_adaln_matches_scaled_adaln() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p = rand_adaln(&mut rng, 8, 8);
            let pair = rand_pair(&mut rng, 8);
            let z = rand_mat(&mut rng, 5, 8);
            let c = Array1::from_iter((0..8).map(|_| rng.gen_range(-1.0..1.0)));
            let want = scale_columns(adaln_forward(z.view(), &p, c.view()).unwrap().view(), pair.bx());
            let folded = fold_adaln(&p, &pair).unwrap();
            let got = balanced_adaln_forward(z.view(), &folded, &pair, c.view()).unwrap();
            assert!(relative_deviation(want.view(), got.view()) <= 1e-12);
        }
    }

    #[test]
    fn dequant_fold_examples() {
        let p = QuantParams::new(8, vec![2.0, 1.0], vec![3, 0], Granularity::PerOutputChannel).unwrap();
        assert_eq!(fold_dequant_scales(&p, &BalancingPair::identity(2)).unwrap(), p);
        let pair = BalancingPair::from_factors(vec![0.5, 3.0], vec![2.0, 1.0 / 3.0]).unwrap();
        let f = fold_dequant_scales(&p, &pair).unwrap();
        assert_eq!(f.delta(), &[1.0, 3.0]);
        assert_eq!(f.zero_point(), p.zero_point());

        let codes = array![[0u8, 255], [7, 3]];
        let a = dequantize(&QuantizedTensor::new(codes.clone(), p.clone()).unwrap());
        let b = dequantize(&QuantizedTensor::new(codes, f).unwrap());
        assert_eq!(b, scale_columns(a.view(), pair.bx()));

        let pt = QuantParams::per_tensor(8, 1.0, 0).unwrap();
        assert!(matches!(fold_dequant_scales(&pt, &pair), Err(SqError::GranularityMismatch(_))));
        assert!(matches!(
            fold_dequant_scales(&p, &BalancingPair::identity(3)),
            Err(SqError::GranularityMismatch(_))
        ));
    }

    #[test]
    fn verify_equivalence_flags_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_mat(&mut rng, 8, 3);
        let inputs: Vec<Array2<f64>> = (0..10).map(|_| rand_mat(&mut rng, 4, 8)).collect();
        let good = BalancingPair::identity(8);
        let f = fold_weight(w.view(), Array1::zeros(3).view(), &good).unwrap();
        let r = verify_equivalence(|x: &Array2<f64>| x.dot(&w), |x| x.dot(&f.w_tilde), &inputs, 0.0);
        assert_eq!(r.max_rel_dev, 0.0);
        assert!(r.passed);

        let pair = rand_pair(&mut rng, 8);
        let bad = BalancingPair::from_factors(pair.bx().to_vec(), pair.bx().to_vec()).unwrap();
        let f = fold_weight(w.view(), Array1::zeros(3).view(), &bad).unwrap();
        let r = verify_equivalence(
            |x: &Array2<f64>| x.dot(&w),
            |x| scale_columns(x.view(), bad.bx()).dot(&f.w_tilde),
            &inputs,
            1e-5,
        );
        assert!(!r.passed);
        assert!(r.max_rel_dev > 1e-2);
        assert_eq!(r.deviations.len(), 10);
        assert_eq!(r.deviations[r.worst_index], r.max_rel_dev);
    }
}
