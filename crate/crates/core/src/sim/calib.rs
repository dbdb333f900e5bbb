use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::block::{forward_block, DiTBlockParams, Layer, SalienceProfile};
use crate::error::{Result, SqError};
use crate::quant::{fake_quantize, fit_minmax, Granularity};
use crate::salience::{activation_salience, weight_salience};
use crate::scalar::Scalar;
use crate::temporal::{spearman_rho, TimestepActivations};

/// Standard deviation of the non-designated conditioning channels.
pub const COND_STD: f64 = 0.3;
/// Relative jitter of a designated channel's amplitude between samples.
pub const AMPLITUDE_JITTER: f64 = 0.05;

/// One synthetic block input at calibration timestep index `t_index`.
#[derive(Debug, Clone)]
pub struct BlockInput<T> {
    pub t_index: usize,
    pub z: Array2<T>,
    pub c: Array1<T>,
}

/// Draws `samples_per_t` inputs for each of `num_t` timesteps, ordered by
/// `(t, sample)`.
///
/// Latent tokens are standard normal. The conditioning vector is
/// `N(0, COND_STD^2)` except on the profile's channels, where it is set so the
/// regressed adaLN scale `1 + gamma` is close to
/// `magnitude * drift * (1 + jitter)`. Amplifying the latent itself would
/// be undone by the LayerNorm inside adaLN, so salience enters through the
/// modulation path.
pub fn gen_inputs(
    d_in: usize,
    tokens: usize,
    num_t: usize,
    samples_per_t: usize,
    act_profile: &SalienceProfile,
    seed: u64,
) -> Result<Vec<BlockInput<f32>>> {
    if num_t == 0 || samples_per_t == 0 || tokens == 0 {
        return Err(SqError::InvalidProfile(format!(
            "need at least one timestep, sample and token (T={num_t}, samples={samples_per_t}, tokens={tokens})"
        )));
    }
    act_profile.validate(d_in)?;
    act_profile.check_timesteps(num_t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_t * samples_per_t);
    for t in 0..num_t {
        for _ in 0..samples_per_t {
            let z = Array2::from_shape_fn((tokens, d_in), |_| rng.sample::<f64, _>(StandardNormal) as f32);
            let mut c = Array1::from_shape_fn(d_in, |_| COND_STD * rng.sample::<f64, _>(StandardNormal));
            for (i, (&j, &m)) in act_profile
                .salient_channels
                .iter()
                .zip(&act_profile.magnitude_scale)
                .enumerate()
            {
                let jitter = 1.0 + AMPLITUDE_JITTER * rng.sample::<f64, _>(StandardNormal);
                c[j] = m * act_profile.drift_at(i, t) * jitter - 1.0;
            }
            out.push(BlockInput {
                t_index: t,
                z,
                c: c.mapv(|v| v as f32),
            });
        }
    }
    Ok(out)
}

/// Tapped full-precision activations for every layer.
#[derive(Debug, Clone)]
pub struct CalibrationSet<T> {
    pub inputs: Vec<BlockInput<T>>,
    pub layers: BTreeMap<Layer, TimestepActivations<T>>,
    /// Value operand of the attention matmul.
    pub attn_v: TimestepActivations<T>,
}

/// Runs the block on freshly drawn inputs and records the activations
/// feeding each linear layer, grouped by timestep.
pub fn gen_calibration(
    p: &DiTBlockParams<f32>,
    timesteps: &[usize],
    samples_per_t: usize,
    tokens: usize,
    act_profile: &SalienceProfile,
    seed: u64,
) -> Result<CalibrationSet<f32>> {
    let inputs = gen_inputs(p.d_in(), tokens, timesteps.len(), samples_per_t, act_profile, seed)?;
    collect_taps(p, inputs, timesteps)
}

/// Forward every input and group the taps by timestep.
pub fn collect_taps(
    p: &DiTBlockParams<f32>,
    inputs: Vec<BlockInput<f32>>,
    timesteps: &[usize],
) -> Result<CalibrationSet<f32>> {
    let outs = inputs
        .par_iter()
        .map(|s| forward_block(p, s.z.view(), s.c.view()))
        .collect::<Result<Vec<_>>>()?;

    let num_t = timesteps.len();
    let mut per_layer: BTreeMap<Layer, Vec<Vec<Array2<f32>>>> =
        Layer::ALL.iter().map(|&l| (l, vec![Vec::new(); num_t])).collect();
    let mut v = vec![Vec::new(); num_t];
    for (s, o) in inputs.iter().zip(outs) {
        for l in Layer::ALL {
            per_layer.get_mut(&l).expect("all layers")[s.t_index].push(o.taps.input(l).clone());
        }
        v[s.t_index].push(o.taps.attn_v);
    }
    let layers = per_layer
        .into_iter()
        .map(|(l, b)| Ok((l, TimestepActivations::new(b, timesteps.to_vec())?)))
        .collect::<Result<_>>()?;
    Ok(CalibrationSet {
        inputs,
        layers,
        attn_v: TimestepActivations::new(v, timesteps.to_vec())?,
    })
}

/// Five-number summary of channel saliences at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepDispersion {
    pub timestep: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeReport {
    pub bits: u8,
    pub act_salience: Vec<f64>,
    pub act_mse: Vec<f64>,
    pub act_rank_corr: f64,
    pub weight_salience: Vec<f64>,
    pub weight_mse: Vec<f64>,
    pub weight_rank_corr: f64,
    pub per_t: Vec<TimestepDispersion>,
    /// `max_t / min_t` of each channel's salience over timesteps.
    pub temporal_ratio: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn squared_error_along<T: Scalar>(x: ArrayView2<'_, T>, fq: ArrayView2<'_, T>, axis: Axis) -> Vec<f64> {
    x.axis_iter(axis)
        .zip(fq.axis_iter(axis))
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(u, v)| (u.as_f64() - v.as_f64()).powi(2))
                .sum::<f64>()
                / a.len().max(1) as f64
        })
        .collect()
}

fn rank_corr(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    spearman_rho(a, b).unwrap_or(0.0)
}

/// Per-channel salience against per-channel quantization error, for the
/// activation (per-tensor min-max quantizer over pooled timesteps) and the
/// weight (per-output-channel min-max), plus per-timestep salience spread.
pub fn challenge_report<T: Scalar>(acts: &TimestepActivations<T>, w: ArrayView2<'_, T>, bits: u8) -> Result<ChallengeReport> {
    if w.nrows() != acts.channels() {
        return Err(SqError::shape(format!(
            "weight has {} input channels, activations have {}",
            w.nrows(),
            acts.channels()
        )));
    }
    let pooled = acts.pooled();
    let act_sal = activation_salience(&[pooled.view()])?.into_inner();
    let ap = fit_minmax(pooled.view(), bits, Granularity::PerTensor)?;
    let act_mse = squared_error_along(pooled.view(), fake_quantize(pooled.view(), &ap)?.view(), Axis(1));

    let w_sal = weight_salience(w).into_inner();
    let wp = fit_minmax(w, bits, Granularity::PerOutputChannel)?;
    let w_mse = squared_error_along(w, fake_quantize(w, &wp)?.view(), Axis(0));

    let per_t_sal = acts.saliences();
    let per_t = per_t_sal
        .iter()
        .zip(acts.timesteps())
        .map(|(s, &t)| {
            let mut v = s.values().to_vec();
            v.sort_by(f64::total_cmp);
            TimestepDispersion {
                timestep: t,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect();
    let temporal_ratio = (0..acts.channels())
        .map(|j| {
            let (lo, hi) = per_t_sal.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
                (lo.min(s.values()[j]), hi.max(s.values()[j]))
            });
            if hi == 0.0 {
                1.0
            } else {
                hi / lo.max(f64::MIN_POSITIVE)
            }
        })
        .collect();

    Ok(ChallengeReport {
        bits,
        act_rank_corr: rank_corr(&act_sal, &act_mse),
        weight_rank_corr: rank_corr(&w_sal, &w_mse),
        act_salience: act_sal,
        act_mse,
        weight_salience: w_sal,
        weight_mse: w_mse,
        per_t,
        temporal_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::init_block;

    const D: usize = 32;

    fn block() -> DiTBlockParams<f32> {
        init_block(D, 4, 4, 17, &SalienceProfile::none()).unwrap()
    }

    fn channel_series(set: &CalibrationSet<f32>, layer: Layer, j: usize) -> Vec<f64> {
        set.layers[&layer].saliences().iter().map(|s| s.values()[j]).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let p = block();
        let prof = SalienceProfile::uniform(vec![2], 8.0);
        let a = gen_calibration(&p, &[0, 1, 2], 2, 4, &prof, 5).unwrap();
        let b = gen_calibration(&p, &[0, 1, 2], 2, 4, &prof, 5).unwrap();
        for l in Layer::ALL {
            assert_eq!(a.layers[&l].pooled(), b.layers[&l].pooled());
        }
        assert_eq!(a.attn_v.pooled(), b.attn_v.pooled());
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let p = block();
        let short = SalienceProfile::uniform(vec![1], 4.0).with_drift(vec![1.0, 2.0]);
        assert!(matches!(
            gen_calibration(&p, &[0, 1, 2], 1, 4, &short, 0),
            Err(SqError::InvalidProfile(_))
        ));
        let negative = SalienceProfile::uniform(vec![1], -4.0);
        assert!(matches!(
            gen_calibration(&p, &[0], 1, 4, &negative, 0),
            Err(SqError::InvalidProfile(_))
        ));
        assert!(matches!(
            gen_calibration(&p, &[0], 0, 4, &SalienceProfile::none(), 0),
            Err(SqError::InvalidProfile(_))
        ));
    }

    #[test]
    fn single_batch_when_one_timestep_and_sample() {
        let set = gen_calibration(&block(), &[0], 1, 4, &SalienceProfile::none(), 1).unwrap();
        assert_eq!(set.layers[&Layer::Qkv].len(), 1);
        assert_eq!(set.layers[&Layer::Qkv].batch(0).len(), 1);
    }

    #[test]
    fn flat_drift_keeps_salience_steady() {
        let prof = SalienceProfile::uniform(vec![3, 11], 10.0).with_drift(vec![1.0; 6]);
        let set = gen_calibration(&block(), &[0, 1, 2, 3, 4, 5], 8, 16, &prof, 2).unwrap();
        for j in [3, 11] {
            let s = channel_series(&set, Layer::Qkv, j);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            assert!(sd / mean < 0.3, "channel {j}: cv {}", sd / mean);
        }
    }

    #[test]
    fn doubled_drift_doubles_salience() {
        let prof = SalienceProfile::uniform(vec![7], 10.0).with_drift(vec![1.0, 2.0]);
        let set = gen_calibration(&block(), &[0, 1], 8, 16, &prof, 3).unwrap();
        for layer in [Layer::Qkv, Layer::Fc1] {
            let s = channel_series(&set, layer, 7);
            let r = s[1] / s[0];
            assert!((1.4..=2.6).contains(&r), "{layer:?}: ratio {r}");
        }
    }

    #[test]
    fn injected_channels_dominate() {
        let prof = SalienceProfile::uniform(vec![4], 20.0);
        let set = gen_calibration(&block(), &[0], 8, 16, &prof, 4).unwrap();
        let s = set.layers[&Layer::Qkv].saliences()[0].values().to_vec();
        let mut rest: Vec<f64> = s.iter().enumerate().filter(|(j, _)| *j != 4).map(|(_, &v)| v).collect();
        rest.sort_by(f64::total_cmp);
        let median = quantile(&rest, 0.5);
        assert!(s[4] / median > 20.0 * 0.7 / 1.0 / 1.5, "{} vs {median}", s[4]);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn flat_instance_reports_zero_correlation() {
        let acts = TimestepActivations::new(vec![vec![Array2::<f64>::ones((4, 6))]], vec![0]).unwrap();
        let w = Array2::<f64>::from_elem((6, 3), 0.5);
        let r = challenge_report(&acts, w.view(), 4).unwrap();
        assert_eq!(r.act_rank_corr, 0.0);
        assert_eq!(r.weight_rank_corr, 0.0);
        assert!(r.temporal_ratio.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn injected_salience_correlates_with_error() {
        // Weight rows of a uniform init have nearly equal maxima, so the
        // ordering has to come from graded injected magnitudes.
        let wprof = SalienceProfile::graded((0..12).map(|i| i * 8 / 3 + 1).collect(), 1.5, 32.0);
        let p = init_block(D, 4, 4, 6, &wprof).unwrap();
        let aprof = SalienceProfile::graded((0..12).map(|i| (i * 8 / 3 + 18) % D).collect(), 1.5, 32.0);
        let set = gen_calibration(&p, &[0, 1], 8, 16, &aprof, 7).unwrap();
        let r = challenge_report(&set.layers[&Layer::Qkv], p.qkv.w.view(), 4).unwrap();
        assert!(r.act_rank_corr > 0.5, "activation rho {}", r.act_rank_corr);
        assert!(r.weight_rank_corr > 0.5, "weight rho {}", r.weight_rank_corr);
        assert_eq!(r.per_t.len(), 2);
        assert!(r.per_t.iter().all(|q| q.min <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= q.max));
    }

    #[test]
    fn drift_swing_shows_in_temporal_ratio() {
        let prof = SalienceProfile::uniform(vec![5, 14], 10.0).with_drift(vec![0.5, 1.0, 2.0, 1.0]);
        let set = gen_calibration(&block(), &[0, 1, 2, 3], 8, 16, &prof, 8).unwrap();
        let w = block().qkv.w;
        let r = challenge_report(&set.layers[&Layer::Qkv], w.view(), 4).unwrap();
        for j in [5, 14] {
            assert!(r.temporal_ratio[j] >= 3.0, "channel {j}: {}", r.temporal_ratio[j]);
        }
    }

    #[test]
    fn mismatched_weight_is_rejected() {
        let acts = TimestepActivations::new(vec![vec![Array2::<f64>::ones((2, 4))]], vec![0]).unwrap();
        assert!(challenge_report(&acts, Array2::<f64>::ones((5, 2)).view(), 4).is_err());
    }
}
