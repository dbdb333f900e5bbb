//! Calibrate, quantize, evaluate: the end-to-end pipeline and its on-disk
//! artifacts.
//!
//! Each `run_*` function holds the artifact-directory lock for its whole
//! duration. The same stages are available in memory through
//! [`run_in_memory`] and the functions in [`stages`].

mod artifacts;
mod config;
mod container;
mod lock;
mod report;
pub mod stages;

use std::fs::File;
use std::path::{Path, PathBuf};

pub use artifacts::{
    calibration_container, calibration_from_container, checkpoint_container, checkpoint_from_container,
    model_container, model_from_container, CALIBRATION_FILE, CHECKPOINT_FILE, MODEL_FILE,
};
pub use config::{
    ActivationProfile, BalancingConfig, CalibrationConfig, EvalConfig, Fitter, ModelConfig,
    OutputConfig, PipelineConfig, Purpose, QuantConfig, PASS_THROUGH_BITS,
};
pub use container::{Container, DType, Element, Tensor, ALIGN, MAGIC};
pub use lock::{ArtifactLock, LOCK_NAME};
pub use report::{
    BalancingDiagnostics, BlockMetrics, Check, DeviationStats, EvalReport, FpEquivalence, LayerMetrics,
    Provenance, QuantSummary, Seeds, VerifyReport, PER_LAYER_HEADER,
};
pub use stages::{run_in_memory, Calibration, Checkpoint};

use crate::error::{Result, SqError};
use crate::sim::{challenge_report, gen_calibration, DiTBlockParams, Layer};
use artifacts::check_hash;

pub const REPORT_FILE: &str = "report.json";
pub const PER_LAYER_FILE: &str = "per_layer.csv";
pub const VERIFY_FILE: &str = "verify.json";
pub const CHALLENGE_LAYERS_FILE: &str = "challenge_layers.csv";
pub const CHALLENGE_CHANNELS_FILE: &str = "challenge_channels.csv";
pub const CHALLENGE_TIMESTEPS_FILE: &str = "challenge_timesteps.csv";

/// Artifact directory: the command-line override, else the config's.
pub fn artifact_dir(cfg: &PipelineConfig, overridden: Option<&Path>) -> PathBuf {
    overridden.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.artifacts.clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SqError::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| SqError::io(path, e))
}

fn load_model(dir: &Path, hash: &str) -> Result<DiTBlockParams<f32>> {
    let c = Container::read(&dir.join(MODEL_FILE))?;
    check_hash(&c, hash, MODEL_FILE)?;
    model_from_container(&c)
}

fn load_calibration(dir: &Path, hash: &str) -> Result<Calibration> {
    let c = Container::read(&dir.join(CALIBRATION_FILE))?;
    check_hash(&c, hash, CALIBRATION_FILE)?;
    calibration_from_container(&c)
}

fn load_checkpoint(dir: &Path, hash: &str) -> Result<Checkpoint> {
    let c = Container::read(&dir.join(CHECKPOINT_FILE))?;
    check_hash(&c, hash, CHECKPOINT_FILE)?;
    checkpoint_from_container(&c)
}

/// Builds (or loads) the model, taps calibration activations and writes
/// `model.sqtn` and `calibration.sqtn`.
pub fn run_calibrate(cfg: &PipelineConfig, dir: &Path) -> Result<Calibration> {
    cfg.validate()?;
    let _lock = ArtifactLock::acquire(dir)?;
    let hash = cfg.hash();
    let model = match &cfg.model.path {
        Some(p) => model_from_container(&Container::read(p)?)?,
        None => stages::build_model(cfg)?,
    };
    let cal = stages::calibrate(cfg, &model)?;
    model_container(&model, &hash).write(&dir.join(MODEL_FILE))?;
    calibration_container(&cal, &hash).write(&dir.join(CALIBRATION_FILE))?;
    Ok(cal)
}

/// Folds balancing into the model, fits quantizers and writes
/// `checkpoint.sqtn`.
pub fn run_quantize(cfg: &PipelineConfig, dir: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let _lock = ArtifactLock::acquire(dir)?;
    let hash = cfg.hash();
    let model = load_model(dir, &hash)?;
    let cal = load_calibration(dir, &hash)?;
    let ckpt = stages::quantize_model(cfg, &model, &cal)?;
    checkpoint_container(&ckpt, &hash).write(&dir.join(CHECKPOINT_FILE))?;
    Ok(ckpt)
}

/// Writes `report.json` and `per_layer.csv`.
pub fn run_evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let _lock = ArtifactLock::acquire(dir)?;
    let hash = cfg.hash();
    let model = load_model(dir, &hash)?;
    let cal = load_calibration(dir, &hash)?;
    let ckpt = load_checkpoint(dir, &hash)?;
    let report = stages::evaluate(cfg, &model, &cal, &ckpt)?;
    write_text(&dir.join(REPORT_FILE), &report.to_json())?;
    report.write_csv(create(&dir.join(PER_LAYER_FILE))?)?;
    Ok(report)
}

/// Salience-versus-error tables for every layer at the configured weight
/// bit width (4 when weights are left in full precision).
pub fn run_challenge(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<(Layer, crate::sim::ChallengeReport)>> {
    cfg.validate()?;
    let _lock = ArtifactLock::acquire(dir)?;
    let model = match &cfg.model.path {
        Some(p) => model_from_container(&Container::read(p)?)?,
        None => stages::build_model(cfg)?,
    };
    let c = &cfg.calibration;
    let set = gen_calibration(
        &model,
        &c.timestep_labels(),
        c.samples_per_t,
        cfg.model.tokens,
        &c.act_profile.to_profile(c.timesteps),
        cfg.seed_for(Purpose::Calibration),
    )?;
    let bits = if cfg.quant.weights_quantized() { cfg.quant.weight_bits } else { 4 };
    let reports = Layer::ALL
        .iter()
        .map(|&l| Ok((l, challenge_report(&set.layers[&l], model.linear(l).w.view(), bits)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(create(&dir.join(CHALLENGE_LAYERS_FILE))?);
    w.write_record(["layer", "role", "bits", "act_rank_corr", "weight_rank_corr", "max_temporal_ratio"])?;
    for (l, r) in &reports {
        let max_ratio = r.temporal_ratio.iter().copied().fold(0.0, f64::max);
        w.write_record([
            l.name().to_string(),
            l.role().to_string(),
            r.bits.to_string(),
            r.act_rank_corr.to_string(),
            r.weight_rank_corr.to_string(),
            max_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;

    let mut w = csv::Writer::from_writer(create(&dir.join(CHALLENGE_CHANNELS_FILE))?);
    w.write_record(["layer", "channel", "act_salience", "act_mse", "weight_salience", "weight_mse", "temporal_ratio"])?;
    for (l, r) in &reports {
        for j in 0..r.act_salience.len() {
            w.write_record([
                l.name().to_string(),
                j.to_string(),
                r.act_salience[j].to_string(),
                r.act_mse[j].to_string(),
                r.weight_salience[j].to_string(),
                r.weight_mse[j].to_string(),
                r.temporal_ratio[j].to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;

    let mut w = csv::Writer::from_writer(create(&dir.join(CHALLENGE_TIMESTEPS_FILE))?);
    w.write_record(["layer", "timestep", "min", "q1", "median", "q3", "max"])?;
    for (l, r) in &reports {
        for q in &r.per_t {
            w.write_record([
                l.name().to_string(),
                q.timestep.to_string(),
                q.min.to_string(),
                q.q1.to_string(),
                q.median.to_string(),
                q.q3.to_string(),
                q.max.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(reports)
}

/// Runs every invariant on the current artifacts and writes `verify.json`.
/// A failing check is reported, not returned as an error.
pub fn run_verify(cfg: &PipelineConfig, dir: &Path) -> Result<VerifyReport> {
    cfg.validate()?;
    let _lock = ArtifactLock::acquire(dir)?;
    let hash = cfg.hash();
    let model = load_model(dir, &hash)?;
    let cal = load_calibration(dir, &hash)?;
    let ckpt = load_checkpoint(dir, &hash)?;
    let mut checks = stages::verify_artifacts(cfg, &model, &cal, &ckpt)?;

    let mut bad = Vec::new();
    for name in [MODEL_FILE, CALIBRATION_FILE, CHECKPOINT_FILE] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| SqError::io(&path, e))?;
        if Container::from_bytes(&bytes)?.to_bytes() != bytes {
            bad.push(name);
        }
    }
    checks.push(Check {
        name: "container_round_trip".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "all containers re-serialize byte for byte".into()
        } else {
            format!("differs after reload: {}", bad.join(", "))
        },
    });

    let report = VerifyReport::new(checks);
    write_text(
        &dir.join(VERIFY_FILE),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    Ok(report)
}
