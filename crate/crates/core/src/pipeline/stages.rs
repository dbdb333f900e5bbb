use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use super::config::{Fitter, PipelineConfig, Purpose};
use super::report::{
    BalancingDiagnostics, BlockMetrics, Check, DeviationStats, EvalReport, FpEquivalence, LayerMetrics,
    Provenance, QuantSummary, Seeds,
};
use crate::error::Result;
use crate::quant::{dequantize_as, fake_quantize, fit_minmax, fit_mse_search, quantize, Granularity, QuantParams, QuantizedTensor};
use crate::reparam::{fold_adaln, fold_dequant_scales, fold_weight, relative_deviation, verify_equivalence};
use crate::salience::{overall_salience, scale_columns, scale_rows, weight_salience, BalancingPair, SalienceVector};
use crate::sim::{
    collect_taps, forward_block, forward_block_with, gen_inputs, init_block, quantile, BlockInput, DiTBlockParams,
    ForwardHook, Layer,
};
use crate::temporal::{calibrate_layer, LayerCalibration, TimestepActivations};

/// Tapped calibration activations and the per-layer balancing estimates.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub acts: BTreeMap<Layer, TimestepActivations<f32>>,
    pub attn_v: TimestepActivations<f32>,
    /// One entry per layer in [`Layer::BALANCED`].
    pub layers: BTreeMap<Layer, LayerCalibration>,
}

impl Calibration {
    pub fn timesteps(&self) -> &[usize] {
        self.attn_v.timesteps()
    }
}

/// The folded model with everything the quantized forward needs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Full-precision folded parameters; `proj_in_scale` is always `None`.
    pub folded: DiTBlockParams<f32>,
    /// Pairs as applied (identity for unbalanced layers).
    pub pairs: BTreeMap<Layer, BalancingPair>,
    /// Quantized folded weights; empty in weight pass-through mode.
    pub weights: BTreeMap<Layer, QuantizedTensor>,
    /// Input quantizers of each layer, fitted in balanced coordinates.
    pub acts: BTreeMap<Layer, QuantParams>,
    /// Per-channel quantizer of the attention value operand and the same
    /// parameters with the output-projection `bx` absorbed into `delta`.
    pub attn_v: Option<(QuantParams, QuantParams)>,
}

impl Checkpoint {
    pub fn pair(&self, layer: Layer) -> BalancingPair {
        self.pairs
            .get(&layer)
            .cloned()
            .unwrap_or_else(|| BalancingPair::identity(self.folded.d_in()))
    }

    /// The output-projection balancing has to be applied explicitly when
    /// there is no value dequantization to absorb it.
    fn needs_explicit_scale(&self) -> bool {
        self.attn_v.is_none() && self.pair(Layer::Proj) != BalancingPair::identity(self.folded.d_in())
    }

    /// Folded block in full precision, equivalent to the original.
    pub fn fp_block(&self) -> DiTBlockParams<f32> {
        let mut p = self.folded.clone();
        if self.pair(Layer::Proj) != BalancingPair::identity(p.d_in()) {
            p.proj_in_scale = Some(to_f32(self.pair(Layer::Proj).bx()));
        }
        p
    }

    /// Folded block with dequantized weights, plus the hook that fake
    /// quantizes activations.
    pub fn quantized_block(&self) -> (DiTBlockParams<f32>, QuantHook<'_>) {
        let mut p = self.folded.clone();
        for (&l, q) in &self.weights {
            p.linear_mut(l).w = dequantize_as(q);
        }
        if self.needs_explicit_scale() {
            p.proj_in_scale = Some(to_f32(self.pair(Layer::Proj).bx()));
        }
        (p, QuantHook { ckpt: self })
    }
}

/// Fake quantizes layer inputs and the attention value operand.
pub struct QuantHook<'a> {
    ckpt: &'a Checkpoint,
}

impl ForwardHook<f32> for QuantHook<'_> {
    fn layer_input(&self, layer: Layer, x: Array2<f32>) -> Array2<f32> {
        match self.ckpt.acts.get(&layer) {
            Some(p) => fake_quantize(x.view(), p).expect("quantizer fitted on this layer"),
            None => x,
        }
    }

    fn attn_value(&self, v: Array2<f32>) -> Array2<f32> {
        match &self.ckpt.attn_v {
            Some((raw, folded)) => {
                let q = quantize(v.view(), raw).expect("quantizer fitted on this operand");
                let (codes, _) = q.into_parts();
                dequantize_as(&QuantizedTensor::new(codes, folded.clone()).expect("same grid"))
            }
            None => v,
        }
    }
}

fn to_f32(v: &[f64]) -> Array1<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn build_model(cfg: &PipelineConfig) -> Result<DiTBlockParams<f32>> {
    let m = &cfg.model;
    init_block(m.d_in, m.heads, m.mlp_ratio, cfg.seed_for(Purpose::Model), &m.weight_profile)
}

fn draw_inputs(cfg: &PipelineConfig, samples_per_t: usize, purpose: Purpose) -> Result<Vec<BlockInput<f32>>> {
    let c = &cfg.calibration;
    gen_inputs(
        cfg.model.d_in,
        cfg.model.tokens,
        c.timesteps,
        samples_per_t,
        &c.act_profile.to_profile(c.timesteps),
        cfg.seed_for(purpose),
    )
}

/// Taps calibration activations and estimates balancing for every balanced
/// layer. Without temporal weighting only the midpoint timestep (index
/// `T / 2`) informs the estimate.
pub fn calibrate(cfg: &PipelineConfig, model: &DiTBlockParams<f32>) -> Result<Calibration> {
    let inputs = draw_inputs(cfg, cfg.calibration.samples_per_t, Purpose::Calibration)?;
    let set = collect_taps(model, inputs, &cfg.calibration.timestep_labels())?;
    let layers = Layer::BALANCED
        .par_iter()
        .map(|&l| {
            let acts = &set.layers[&l];
            let acts = if cfg.balancing.ssc { acts.clone() } else { acts.select(acts.len() / 2) };
            Ok((l, calibrate_layer(&acts, model.linear(l).w.view(), cfg.balancing.eps)?))
        })
        .collect::<Result<_>>()?;
    Ok(Calibration {
        acts: set.layers,
        attn_v: set.attn_v,
        layers,
    })
}

fn fit(x: ArrayView2<'_, f32>, bits: u8, g: Granularity, cfg: &PipelineConfig) -> Result<QuantParams> {
    match cfg.quant.fitter {
        Fitter::Minmax => fit_minmax(x, bits, g),
        Fitter::MseSearch => fit_mse_search(x, bits, g, &cfg.quant.grid()),
    }
}

/// Every other channel of `bw` scaled by 1.5: the pair no longer inverts.
pub fn corrupt(pair: &BalancingPair) -> BalancingPair {
    let bw = pair
        .bw()
        .iter()
        .enumerate()
        .map(|(j, &b)| if j % 2 == 0 { b * 1.5 } else { b })
        .collect();
    BalancingPair::from_factors(pair.bx().to_vec(), bw).expect("positive factors")
}

/// Folds the balancing pairs, then fits and applies the quantizers.
pub fn quantize_model(cfg: &PipelineConfig, model: &DiTBlockParams<f32>, cal: &Calibration) -> Result<Checkpoint> {
    let d = model.d_in();
    // Fold in double precision so the stored weights are rounded once.
    let wide = model.cast::<f64>();
    let mut folded = wide.clone();
    folded.proj_in_scale = None;
    let mut pairs = BTreeMap::new();
    for l in Layer::BALANCED {
        let mut pair = if cfg.balancing.balances(l) {
            cal.layers[&l].pair.clone()
        } else {
            BalancingPair::identity(d)
        };
        // bx always comes from the clean pair; only the weight side is broken.
        let bx = pair.clone();
        if cfg.negative_control {
            pair = corrupt(&pair);
        }
        let lin = wide.linear(l);
        let fw = fold_weight(lin.w.view(), lin.b.view(), &pair)?;
        folded.linear_mut(l).w = fw.w_tilde;
        match l {
            Layer::Qkv => {
                folded.adaln1 = fold_adaln(&wide.adaln1, &bx)?;
                folded.unit1 = Array1::from(bx.bx().to_vec());
            }
            Layer::Fc1 => {
                folded.adaln2 = fold_adaln(&wide.adaln2, &bx)?;
                folded.unit2 = Array1::from(bx.bx().to_vec());
            }
            _ => {}
        }
        pairs.insert(l, pair);
    }
    let folded = folded.cast::<f32>();

    let q = &cfg.quant;
    let weights = if q.weights_quantized() {
        Layer::ALL
            .par_iter()
            .map(|&l| {
                let w = folded.linear(l).w.view();
                Ok((l, quantize(w, &fit(w, q.weight_bits, q.weight_granularity, cfg)?)?))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };

    let mut acts = BTreeMap::new();
    let mut attn_v = None;
    if q.acts_quantized() {
        for l in Layer::ALL {
            let pooled = cal.acts[&l].pooled();
            let bx = pairs.get(&l).map(|p| p.bx().to_vec()).unwrap_or_else(|| vec![1.0; pooled.ncols()]);
            let balanced = scale_columns(pooled.view(), &bx);
            acts.insert(l, fit(balanced.view(), q.act_bits, q.act_granularity, cfg)?);
        }
        let v = cal.attn_v.pooled();
        let raw = fit(v.view(), q.act_bits, Granularity::PerOutputChannel, cfg)?;
        let clean = cal.layers[&Layer::Proj].pair.clone();
        let proj = if cfg.balancing.balances(Layer::Proj) { clean } else { BalancingPair::identity(d) };
        let folded_v = fold_dequant_scales(&raw, &proj)?;
        attn_v = Some((raw, folded_v));
    }

    Ok(Checkpoint {
        folded,
        pairs,
        weights,
        acts,
        attn_v,
    })
}

fn mse(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn layer_so(acts: &TimestepActivations<f32>, w: ArrayView2<'_, f32>) -> Result<f64> {
    let per_t = acts.saliences();
    let pooled: Vec<f64> = (0..acts.channels())
        .map(|j| per_t.iter().map(|s| s.values()[j]).fold(0.0, f64::max))
        .collect();
    Ok(overall_salience(&SalienceVector::new(pooled)?)?.max(overall_salience(&weight_salience(w))?))
}

/// Compares the quantized folded block against the original on held-out
/// inputs covering every calibration timestep.
pub fn evaluate(
    cfg: &PipelineConfig,
    model: &DiTBlockParams<f32>,
    cal: &Calibration,
    ckpt: &Checkpoint,
) -> Result<EvalReport> {
    let inputs = draw_inputs(cfg, cfg.eval.samples_per_t, Purpose::Eval)?;
    let (qp, hook) = ckpt.quantized_block();
    let runs = inputs
        .par_iter()
        .map(|s| {
            let fp = forward_block(model, s.z.view(), s.c.view())?;
            let q = forward_block_with(&qp, s.z.view(), s.c.view(), &hook)?;
            Ok((fp, q))
        })
        .collect::<Result<Vec<_>>>()?;

    let layers = Layer::ALL
        .iter()
        .map(|&l| {
            let bx = ckpt.pair(l).bx().to_vec();
            let w_mse = mse(model.linear(l).w.view(), scale_rows(qp.linear(l).w.view(), &bx).view());
            let a_mse = match ckpt.acts.get(&l) {
                Some(p) => mean(runs.iter().map(|(_, q)| {
                    let x = q.taps.input(l);
                    let fq = fake_quantize(x.view(), p).expect("fitted quantizer");
                    let inv: Vec<f64> = bx.iter().map(|b| b.recip()).collect();
                    mse(scale_columns(x.view(), &inv).view(), scale_columns(fq.view(), &inv).view())
                })),
                None => 0.0,
            };
            let out_mse = mean(runs.iter().map(|(f, q)| mse(f.taps.output(l).view(), q.taps.output(l).view())));
            let (so_pre, so_post) = match cal.layers.get(&l) {
                Some(c) if cfg.balancing.balances(l) => (c.diagnostics.so_pre, c.diagnostics.so_post),
                _ => {
                    let so = layer_so(&cal.acts[&l], model.linear(l).w.view())?;
                    (so, so)
                }
            };
            Ok(LayerMetrics {
                layer: l,
                role: l.role().to_string(),
                w_mse,
                a_mse,
                out_mse,
                so_pre,
                so_post,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let devs: Vec<f64> = runs
        .iter()
        .map(|(f, q)| relative_deviation(f.out.view(), q.out.view()))
        .collect();
    let output_mse = mean(runs.iter().map(|(f, q)| mse(f.out.view(), q.out.view())));
    let mut sorted = devs.clone();
    sorted.sort_by(f64::total_cmp);
    let labels = cal.timesteps();
    let per_timestep = labels
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            (
                t,
                mean(inputs.iter().zip(&devs).filter(|(s, _)| s.t_index == ti).map(|(_, &v)| v)),
            )
        })
        .collect();

    let balancing = Layer::BALANCED
        .iter()
        .map(|&l| {
            let c = &cal.layers[&l];
            BalancingDiagnostics {
                layer: l,
                role: l.role().to_string(),
                applied: cfg.balancing.balances(l),
                timesteps: c.diagnostics.timesteps.clone(),
                rho: c.weights.rho.clone(),
                eta: c.weights.eta.clone(),
                eta_sum: c.weights.eta.iter().sum(),
                so_pre: c.diagnostics.so_pre,
                so_post: c.diagnostics.so_post,
                max_inverse_error: ckpt.pair(l).max_inverse_error(),
            }
        })
        .collect();

    let fp_equivalence = fp_equivalence(model, ckpt, &inputs, cfg.eval.tolerance);

    Ok(EvalReport {
        quant: QuantSummary {
            weight_bits: cfg.quant.weight_bits,
            act_bits: cfg.quant.act_bits,
            balancing: cfg.balancing.enabled,
            ssc: cfg.balancing.ssc,
            negative_control: cfg.negative_control,
        },
        layers,
        block: BlockMetrics {
            output_mse,
            relative_deviation: DeviationStats {
                mean: mean(devs.iter().copied()),
                min: sorted[0],
                median: quantile(&sorted, 0.5),
                p90: quantile(&sorted, 0.9),
                max: sorted[sorted.len() - 1],
                per_timestep,
            },
        },
        balancing,
        fp_equivalence,
        provenance: provenance(cfg),
    })
}

pub fn provenance(cfg: &PipelineConfig) -> Provenance {
    Provenance {
        tool: "sq".into(),
        version: crate::VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds: Seeds {
            model: cfg.seed_for(Purpose::Model),
            calibration: cfg.seed_for(Purpose::Calibration),
            eval: cfg.seed_for(Purpose::Eval),
        },
    }
}

/// Original block against the folded block, both in full precision.
pub fn fp_equivalence(
    model: &DiTBlockParams<f32>,
    ckpt: &Checkpoint,
    inputs: &[BlockInput<f32>],
    tol: f64,
) -> FpEquivalence {
    let fp = ckpt.fp_block();
    let run = |p: &DiTBlockParams<f32>, s: &BlockInput<f32>| {
        forward_block(p, s.z.view(), s.c.view())
            .map(|o| o.out)
            .unwrap_or_else(|_| Array2::from_elem(s.z.dim(), f32::NAN))
    };
    let r = verify_equivalence(|s| run(model, s), |s| run(&fp, s), inputs, tol);
    FpEquivalence {
        max_rel_dev: r.max_rel_dev,
        tolerance: tol,
        passed: r.passed,
        explicit_projection_scale: ckpt.needs_explicit_scale(),
    }
}

/// Model, calibration, checkpoint and report without touching the disk.
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<(Calibration, Checkpoint, EvalReport)> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let cal = calibrate(cfg, &model)?;
    let ckpt = quantize_model(cfg, &model, &cal)?;
    let report = evaluate(cfg, &model, &cal, &ckpt)?;
    Ok((cal, ckpt, report))
}

/// Structural checks on in-memory artifacts. File-level checks are added by
/// the caller.
pub fn verify_artifacts(
    cfg: &PipelineConfig,
    model: &DiTBlockParams<f32>,
    cal: &Calibration,
    ckpt: &Checkpoint,
) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let inv = Layer::BALANCED
        .iter()
        .map(|&l| (l, ckpt.pair(l).max_inverse_error()))
        .fold((Layer::Qkv, 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    checks.push(Check {
        name: "inverse_pairs".into(),
        passed: inv.1 <= 1e-9,
        detail: format!("max |bx*bw - 1| = {:e} at {}", inv.1, inv.0.name()),
    });

    let eta_err = cal
        .layers
        .values()
        .map(|c| (c.weights.eta.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "eta_normalized".into(),
        passed: eta_err <= 1e-12,
        detail: format!("max |sum(eta) - 1| = {eta_err:e}"),
    });

    let inputs = draw_inputs(cfg, cfg.eval.samples_per_t, Purpose::Eval)?;
    let eq = fp_equivalence(model, ckpt, &inputs, cfg.eval.tolerance);
    checks.push(Check {
        name: "fp_equivalence".into(),
        passed: eq.passed,
        detail: format!("max relative deviation {:e} (tolerance {:e})", eq.max_rel_dev, eq.tolerance),
    });

    let over = ckpt
        .weights
        .iter()
        .filter(|(_, q)| q.codes().iter().any(|&c| i32::from(c) > q.params().qmax()))
        .map(|(l, _)| l.name())
        .collect::<Vec<_>>();
    checks.push(Check {
        name: "code_range".into(),
        passed: over.is_empty(),
        detail: if over.is_empty() {
            format!("{} weight tensors within range", ckpt.weights.len())
        } else {
            format!("codes above range in {}", over.join(", "))
        },
    });

    if let Some((raw, folded)) = &ckpt.attn_v {
        let proj = if cfg.balancing.balances(Layer::Proj) {
            cal.layers[&Layer::Proj].pair.clone()
        } else {
            BalancingPair::identity(model.d_in())
        };
        let ok = raw
            .delta()
            .iter()
            .zip(folded.delta())
            .zip(proj.bx())
            .all(|((r, f), b)| r * b == *f)
            && raw.zero_point() == folded.zero_point();
        checks.push(Check {
            name: "dequant_fold".into(),
            passed: ok,
            detail: "value-operand step sizes carry the projection balancing".into(),
        });
    }
    Ok(checks)
}
