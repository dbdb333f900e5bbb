//! Conversion of models, calibrations and checkpoints to and from tensor
//! containers.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::container::{Container, Tensor};
use super::stages::{Calibration, Checkpoint};
use crate::error::{Result, SqError};
use crate::quant::{Granularity, QuantParams, QuantizedTensor};
use crate::reparam::AdaLNParams;
use crate::salience::{BalancingPair, SalienceVector};
use crate::sim::{DiTBlockParams, Layer, Linear};
use crate::temporal::{CalibrationDiagnostics, LayerCalibration, SpearmanWeights, TimestepActivations};

pub const MODEL_FILE: &str = "model.sqtn";
pub const CALIBRATION_FILE: &str = "calibration.sqtn";
pub const CHECKPOINT_FILE: &str = "checkpoint.sqtn";

fn put_block(c: &mut Container, prefix: &str, p: &DiTBlockParams<f32>) {
    c.set_meta(&format!("{prefix}heads"), p.heads);
    c.set_meta(&format!("{prefix}mlp_ratio"), p.mlp_ratio);
    for (name, a) in [("adaln1", &p.adaln1), ("adaln2", &p.adaln2)] {
        c.insert(format!("{prefix}{name}/w_gamma"), Tensor::from_array2(&a.w_gamma));
        c.insert(format!("{prefix}{name}/w_beta"), Tensor::from_array2(&a.w_beta));
        c.insert(format!("{prefix}{name}/b_gamma"), Tensor::from_slice(&a.b_gamma.to_vec()));
        c.insert(format!("{prefix}{name}/b_beta"), Tensor::from_slice(&a.b_beta.to_vec()));
    }
    c.insert(format!("{prefix}adaln1/unit"), Tensor::from_slice(&p.unit1.to_vec()));
    c.insert(format!("{prefix}adaln2/unit"), Tensor::from_slice(&p.unit2.to_vec()));
    for l in Layer::ALL {
        let lin = p.linear(l);
        c.insert(format!("{prefix}{}/w", l.name()), Tensor::from_array2(&lin.w));
        c.insert(format!("{prefix}{}/b", l.name()), Tensor::from_slice(&lin.b.to_vec()));
    }
    if let Some(s) = &p.proj_in_scale {
        c.insert(format!("{prefix}proj/in_scale"), Tensor::from_slice(&s.to_vec()));
    }
}

fn get_block(c: &Container, prefix: &str) -> Result<DiTBlockParams<f32>> {
    let adaln = |name: &str| -> Result<AdaLNParams<f32>> {
        AdaLNParams::new(
            c.get(&format!("{prefix}{name}/w_gamma"))?.to_array2()?,
            c.get(&format!("{prefix}{name}/w_beta"))?.to_array2()?,
            c.get(&format!("{prefix}{name}/b_gamma"))?.to_array1()?,
            c.get(&format!("{prefix}{name}/b_beta"))?.to_array1()?,
        )
    };
    let linear = |l: Layer| -> Result<Linear<f32>> {
        Ok(Linear {
            w: c.get(&format!("{prefix}{}/w", l.name()))?.to_array2()?,
            b: c.get(&format!("{prefix}{}/b", l.name()))?.to_array1()?,
        })
    };
    let p = DiTBlockParams {
        heads: c.meta(&format!("{prefix}heads"))?,
        mlp_ratio: c.meta(&format!("{prefix}mlp_ratio"))?,
        adaln1: adaln("adaln1")?,
        adaln2: adaln("adaln2")?,
        unit1: c.get(&format!("{prefix}adaln1/unit"))?.to_array1()?,
        unit2: c.get(&format!("{prefix}adaln2/unit"))?.to_array1()?,
        qkv: linear(Layer::Qkv)?,
        proj: linear(Layer::Proj)?,
        fc1: linear(Layer::Fc1)?,
        fc2: linear(Layer::Fc2)?,
        proj_in_scale: match c.tensors.get(&format!("{prefix}proj/in_scale")) {
            Some(t) => Some(t.to_array1()?),
            None => None,
        },
    };
    p.validate()?;
    Ok(p)
}

pub fn model_container(p: &DiTBlockParams<f32>, config_hash: &str) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "model");
    c.set_meta("config_hash", config_hash);
    put_block(&mut c, "", p);
    c
}

pub fn model_from_container(c: &Container) -> Result<DiTBlockParams<f32>> {
    get_block(c, "")
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    timesteps: Vec<usize>,
    so_pre: f64,
    so_post: f64,
}

pub fn calibration_container(cal: &Calibration, config_hash: &str) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "calibration");
    c.set_meta("config_hash", config_hash);
    c.set_meta("timesteps", cal.timesteps());
    let put_acts = |c: &mut Container, prefix: &str, a: &TimestepActivations<f32>| {
        for (b, t) in a.batches().zip(a.timesteps()) {
            let views: Vec<_> = b.iter().map(|x| x.view()).collect();
            let pooled = ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform width");
            c.insert(format!("{prefix}/{t}"), Tensor::from_array2(&pooled));
        }
    };
    for (l, a) in &cal.acts {
        put_acts(&mut c, &format!("acts/{}", l.name()), a);
    }
    put_acts(&mut c, "acts/attn_v", &cal.attn_v);
    for (l, lc) in &cal.layers {
        let n = l.name();
        let dg = &lc.diagnostics;
        for (s, t) in dg.per_t_salience.iter().zip(&dg.timesteps) {
            c.insert(format!("salience/{n}/{t}"), Tensor::from_slice(s.values()));
        }
        c.insert(format!("rho/{n}"), Tensor::from_slice(&lc.weights.rho));
        c.insert(format!("eta/{n}"), Tensor::from_slice(&lc.weights.eta));
        c.insert(format!("s_rho/{n}"), Tensor::from_slice(dg.temporal_salience.values()));
        c.insert(format!("sw/{n}"), Tensor::from_slice(dg.weight_salience.values()));
        c.insert(format!("bx/{n}"), Tensor::from_slice(lc.pair.bx()));
        c.insert(format!("bw/{n}"), Tensor::from_slice(lc.pair.bw()));
        c.set_meta(
            &format!("layer/{n}"),
            LayerMeta {
                timesteps: dg.timesteps.clone(),
                so_pre: dg.so_pre,
                so_post: dg.so_post,
            },
        );
    }
    c
}

pub fn calibration_from_container(c: &Container) -> Result<Calibration> {
    let labels: Vec<usize> = c.meta("timesteps")?;
    let get_acts = |prefix: &str| -> Result<TimestepActivations<f32>> {
        let per_t = labels
            .iter()
            .map(|t| Ok(vec![c.get(&format!("{prefix}/{t}"))?.to_array2()?]))
            .collect::<Result<Vec<_>>>()?;
        TimestepActivations::new(per_t, labels.clone())
    };
    let acts = Layer::ALL
        .iter()
        .map(|&l| Ok((l, get_acts(&format!("acts/{}", l.name()))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let attn_v = get_acts("acts/attn_v")?;
    let vec = |name: String| -> Result<Vec<f64>> { c.get(&name)?.to_vec() };
    let layers = Layer::BALANCED
        .iter()
        .map(|&l| {
            let n = l.name();
            let meta: LayerMeta = c.meta(&format!("layer/{n}"))?;
            let per_t_salience = meta
                .timesteps
                .iter()
                .map(|t| SalienceVector::new(vec(format!("salience/{n}/{t}"))?))
                .collect::<Result<Vec<_>>>()?;
            let lc = LayerCalibration {
                pair: BalancingPair::from_factors(vec(format!("bx/{n}"))?, vec(format!("bw/{n}"))?)?,
                weights: SpearmanWeights {
                    eta: vec(format!("eta/{n}"))?,
                    rho: vec(format!("rho/{n}"))?,
                },
                diagnostics: CalibrationDiagnostics {
                    timesteps: meta.timesteps,
                    per_t_salience,
                    weight_salience: SalienceVector::new(vec(format!("sw/{n}"))?)?,
                    temporal_salience: SalienceVector::new(vec(format!("s_rho/{n}"))?)?,
                    so_pre: meta.so_pre,
                    so_post: meta.so_post,
                },
            };
            Ok((l, lc))
        })
        .collect::<Result<_>>()?;
    Ok(Calibration { acts, attn_v, layers })
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsMeta {
    bits: u8,
    granularity: Granularity,
}

fn put_params(c: &mut Container, prefix: &str, p: &QuantParams) {
    c.insert(format!("{prefix}/delta"), Tensor::from_slice(p.delta()));
    c.insert(format!("{prefix}/zero_point"), Tensor::from_slice(p.zero_point()));
    c.set_meta(
        prefix,
        ParamsMeta {
            bits: p.bits(),
            granularity: p.granularity(),
        },
    );
}

fn get_params(c: &Container, prefix: &str) -> Result<QuantParams> {
    let m: ParamsMeta = c.meta(prefix)?;
    QuantParams::new(
        m.bits,
        c.get(&format!("{prefix}/delta"))?.to_vec()?,
        c.get(&format!("{prefix}/zero_point"))?.to_vec()?,
        m.granularity,
    )
}

/// Stores the folded full-precision weights alongside the codes, so the
/// checkpoint serves both the equivalence check and quantized inference.
pub fn checkpoint_container(k: &Checkpoint, config_hash: &str) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "checkpoint");
    c.set_meta("config_hash", config_hash);
    put_block(&mut c, "folded/", &k.folded);
    for (l, p) in &k.pairs {
        c.insert(format!("pair/{}/bx", l.name()), Tensor::from_slice(p.bx()));
        c.insert(format!("pair/{}/bw", l.name()), Tensor::from_slice(p.bw()));
    }
    for (l, q) in &k.weights {
        c.insert(format!("codes/{}", l.name()), Tensor::from_array2(q.codes()));
        put_params(&mut c, &format!("wq/{}", l.name()), q.params());
    }
    for (l, p) in &k.acts {
        put_params(&mut c, &format!("aq/{}", l.name()), p);
    }
    if let Some((raw, folded)) = &k.attn_v {
        put_params(&mut c, "vq/raw", raw);
        put_params(&mut c, "vq/folded", folded);
    }
    c
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    let folded = get_block(c, "folded/")?;
    let mut pairs = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut acts = BTreeMap::new();
    for l in Layer::ALL {
        let n = l.name();
        if c.tensors.contains_key(&format!("pair/{n}/bx")) {
            let pair = BalancingPair::from_factors(
                c.get(&format!("pair/{n}/bx"))?.to_vec()?,
                c.get(&format!("pair/{n}/bw"))?.to_vec()?,
            )?;
            pairs.insert(l, pair);
        }
        if c.tensors.contains_key(&format!("codes/{n}")) {
            let codes: Array2<u8> = c.get(&format!("codes/{n}"))?.to_array2()?;
            weights.insert(l, QuantizedTensor::new(codes, get_params(c, &format!("wq/{n}"))?)?);
        }
        if c.metadata.contains_key(&format!("aq/{n}")) {
            acts.insert(l, get_params(c, &format!("aq/{n}"))?);
        }
    }
    let attn_v = if c.metadata.contains_key("vq/raw") {
        Some((get_params(c, "vq/raw")?, get_params(c, "vq/folded")?))
    } else {
        None
    };
    Ok(Checkpoint {
        folded,
        pairs,
        weights,
        acts,
        attn_v,
    })
}

/// Rejects artifacts produced under a different configuration.
pub fn check_hash(c: &Container, expected: &str, what: &str) -> Result<()> {
    let got: String = c.meta("config_hash")?;
    if got != expected {
        return Err(SqError::Config(format!(
            "{what} was produced by config {got}, current config is {expected}; rerun the earlier stages"
        )));
    }
    Ok(())
}
