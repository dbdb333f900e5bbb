use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SqError};
use crate::quant::{default_shrink_grid, Granularity, MAX_BITS};
use crate::sim::{Layer, SalienceProfile};

/// Bit width meaning "leave this operand in full precision".
pub const PASS_THROUGH_BITS: u8 = 32;

/// Root configuration. Every section has defaults, so `{}` is a valid file;
/// unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub quant: QuantConfig,
    pub balancing: BalancingConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    /// Corrupts `bw` before folding so the equivalence checks must fail.
    pub negative_control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub weight_profile: SalienceProfile,
    /// Load the block from this model container instead of initializing it.
    pub path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            tokens: 16,
            heads: 4,
            mlp_ratio: 4,
            weight_profile: SalienceProfile::graded(default_weight_channels(), 1.5, 32.0),
            path: None,
        }
    }
}

/// Activation channels, their magnitudes and a drift schedule given as
/// piecewise-linear knots over normalized time `[0, 1]`.
///
/// With `phase` set, channel `i` follows the knots shifted by `phase[i]`
/// (wrapping around), so different channels peak at different timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationProfile {
    pub salient_channels: Vec<usize>,
    pub magnitude_scale: Vec<f64>,
    pub drift_knots: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Default for ActivationProfile {
    fn default() -> Self {
        let p = SalienceProfile::graded(default_act_channels(), 1.5, 32.0);
        Self {
            salient_channels: p.salient_channels,
            magnitude_scale: p.magnitude_scale,
            drift_knots: vec![4.0, 1.0, 4.0],
            phase: default_phase(24),
        }
    }
}

/// Piecewise-linear interpolation of `k` at `u` in `[0, 1]`.
fn eval_knots(k: &[f64], u: f64) -> f64 {
    if k.len() == 1 {
        return k[0];
    }
    let pos = u.clamp(0.0, 1.0) * (k.len() - 1) as f64;
    let i = (pos.floor() as usize).min(k.len() - 2);
    let f = pos - i as f64;
    k[i] + f * (k[i + 1] - k[i])
}

fn normalized_time(t: usize, num_t: usize) -> f64 {
    if num_t > 1 {
        t as f64 / (num_t - 1) as f64
    } else {
        0.5
    }
}

impl ActivationProfile {
    /// Samples the knots at `num_t` evenly spaced points.
    pub fn drift_schedule(&self, num_t: usize) -> Vec<f64> {
        if self.drift_knots.is_empty() {
            return Vec::new();
        }
        (0..num_t)
            .map(|t| eval_knots(&self.drift_knots, normalized_time(t, num_t)))
            .collect()
    }

    pub fn to_profile(&self, num_t: usize) -> SalienceProfile {
        let phased = !self.phase.is_empty() && !self.drift_knots.is_empty();
        let channel_drift = if phased {
            self.phase
                .iter()
                .map(|p| {
                    (0..num_t)
                        .map(|t| eval_knots(&self.drift_knots, (normalized_time(t, num_t) + p).rem_euclid(1.0)))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        SalienceProfile {
            salient_channels: self.salient_channels.clone(),
            magnitude_scale: self.magnitude_scale.clone(),
            temporal_drift: if phased { Vec::new() } else { self.drift_schedule(num_t) },
            channel_drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Number of calibration timesteps.
    pub timesteps: usize,
    pub samples_per_t: usize,
    /// Spacing between timestep labels: `0, stride, 2 * stride, ...`.
    pub stride: usize,
    pub act_profile: ActivationProfile,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            timesteps: 10,
            samples_per_t: 8,
            stride: 100,
            act_profile: ActivationProfile::default(),
        }
    }
}

impl CalibrationConfig {
    pub fn timestep_labels(&self) -> Vec<usize> {
        (0..self.timesteps).map(|i| i * self.stride).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    Minmax,
    MseSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub weight_granularity: Granularity,
    pub act_granularity: Granularity,
    pub fitter: Fitter,
    /// Clipping ratios tried by `mse_search`; the default grid when absent.
    pub shrink_grid: Option<Vec<f64>>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 8,
            weight_granularity: Granularity::PerOutputChannel,
            act_granularity: Granularity::PerTensor,
            fitter: Fitter::Minmax,
            shrink_grid: None,
        }
    }
}

impl QuantConfig {
    pub fn grid(&self) -> Vec<f64> {
        self.shrink_grid.clone().unwrap_or_else(default_shrink_grid)
    }

    pub fn weights_quantized(&self) -> bool {
        self.weight_bits != PASS_THROUGH_BITS
    }

    pub fn acts_quantized(&self) -> bool {
        self.act_bits != PASS_THROUGH_BITS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancingConfig {
    pub enabled: bool,
    pub eps: f64,
    pub projection1: bool,
    pub projection2: bool,
    pub fc1: bool,
    /// Temporal weighting over all timesteps; otherwise only the midpoint
    /// timestep is used.
    pub ssc: bool,
}

impl Default for BalancingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eps: crate::salience::DEFAULT_EPS,
            projection1: true,
            projection2: true,
            fc1: true,
            ssc: true,
        }
    }
}

impl BalancingConfig {
    pub fn balances(&self, layer: Layer) -> bool {
        self.enabled
            && match layer {
                Layer::Qkv => self.projection1,
                Layer::Proj => self.projection2,
                Layer::Fc1 => self.fc1,
                Layer::Fc2 => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_t: usize,
    /// Relative deviation allowed between the folded and the original block
    /// in full precision.
    pub tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_t: 4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub artifacts: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            artifacts: PathBuf::from("artifacts"),
        }
    }
}

fn default_weight_channels() -> Vec<usize> {
    (0..24).map(|i| i * 8 / 3 + 1).collect()
}

/// Golden-ratio offsets: well spread and unrelated to the magnitude order.
fn default_phase(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.618_034).fract()).collect()
}

fn default_act_channels() -> Vec<usize> {
    (0..24).map(|i| (i * 8 / 3 + 38) % 64).collect()
}

/// Stream ids for [`PipelineConfig::seed_for`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Model = 1,
    Calibration = 2,
    Eval = 3,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SqError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SqError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SqError::Config(m));
        let bits_ok = |b: u8| (2..=MAX_BITS).contains(&b) || b == PASS_THROUGH_BITS;
        if !bits_ok(self.quant.weight_bits) || !bits_ok(self.quant.act_bits) {
            return bad(format!(
                "bits must be in 2..=8 or {PASS_THROUGH_BITS}, got W{} A{}",
                self.quant.weight_bits, self.quant.act_bits
            ));
        }
        if !(self.balancing.eps > 0.0 && self.balancing.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.balancing.eps));
        }
        let c = &self.calibration;
        if c.timesteps == 0 || c.samples_per_t == 0 || self.eval.samples_per_t == 0 {
            return bad("timesteps and samples per timestep must be at least 1".into());
        }
        if c.stride == 0 && c.timesteps > 1 {
            return bad("stride must be positive".into());
        }
        let m = &self.model;
        if m.d_in == 0 || m.tokens == 0 || m.heads == 0 || m.mlp_ratio == 0 || !m.d_in.is_multiple_of(m.heads) {
            return bad(format!(
                "invalid block shape d_in={} heads={} mlp_ratio={} tokens={}",
                m.d_in, m.heads, m.mlp_ratio, m.tokens
            ));
        }
        if let Some(g) = &self.quant.shrink_grid {
            if g.is_empty() || g.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
                return bad("shrink grid entries must lie in (0, 1]".into());
            }
        }
        if self.eval.tolerance.is_nan() || self.eval.tolerance < 0.0 {
            return bad("tolerance must be non-negative".into());
        }
        let ap = &c.act_profile;
        if !ap.phase.is_empty() && ap.phase.len() != ap.salient_channels.len() {
            return bad("one phase per salient activation channel is required".into());
        }
        if ap.phase.iter().any(|p| !p.is_finite()) {
            return bad("phases must be finite".into());
        }
        if ap.drift_knots.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return bad("drift knots must be positive".into());
        }
        m.weight_profile
            .validate(m.d_in)
            .and_then(|_| ap.to_profile(c.timesteps).validate(m.d_in))
            .map_err(|e| SqError::Config(e.to_string()))
    }

    /// Canonical serialization: the struct's JSON form with the output
    /// location cleared, since where artifacts go is not part of an
    /// experiment's identity.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig {
            artifacts: PathBuf::new(),
        };
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Per-purpose seed: the first output of ChaCha8 keyed by the root seed
    /// on stream `purpose`.
    pub fn seed_for(&self, purpose: Purpose) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose as u64);
        rng.next_u64()
    }
}
