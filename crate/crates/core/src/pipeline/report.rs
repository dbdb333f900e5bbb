use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::Layer;

pub const PER_LAYER_HEADER: [&str; 7] = ["layer", "role", "w_mse", "a_mse", "out_mse", "so_pre", "so_post"];

/// Layer metrics. Weight and activation errors are measured in the original
/// coordinates: `diag(bx) * Q(W~)` against `W`, and `Q(X~) / bx` against
/// `X`, so they compare across balancing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: Layer,
    pub role: String,
    pub w_mse: f64,
    pub a_mse: f64,
    /// Layer output of the quantized block against the full-precision block.
    pub out_mse: f64,
    pub so_pre: f64,
    pub so_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    /// Mean relative deviation per timestep label.
    pub per_timestep: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub output_mse: f64,
    pub relative_deviation: DeviationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingDiagnostics {
    pub layer: Layer,
    pub role: String,
    pub applied: bool,
    /// Timestep labels the salience estimate used.
    pub timesteps: Vec<usize>,
    pub rho: Vec<f64>,
    pub eta: Vec<f64>,
    pub eta_sum: f64,
    pub so_pre: f64,
    pub so_post: f64,
    pub max_inverse_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpEquivalence {
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The output-projection balancing was applied as an explicit scale on
    /// the attention output instead of being absorbed.
    pub explicit_projection_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub balancing: bool,
    pub ssc: bool,
    pub negative_control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub calibration: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub quant: QuantSummary,
    pub layers: Vec<LayerMetrics>,
    pub block: BlockMetrics,
    pub balancing: Vec<BalancingDiagnostics>,
    pub fp_equivalence: FpEquivalence,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn layer(&self, layer: Layer) -> Option<&LayerMetrics> {
        self.layers.iter().find(|m| m.layer == layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(PER_LAYER_HEADER)?;
        for m in &self.layers {
            out.write_record([
                m.layer.name().to_string(),
                m.role.clone(),
                m.w_mse.to_string(),
                m.a_mse.to_string(),
                m.out_mse.to_string(),
                m.so_pre.to_string(),
                m.so_post.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }
}
