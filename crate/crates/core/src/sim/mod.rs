//! A desk-scale diffusion-transformer block and a synthetic multi-timestep
//! calibration generator.
//!
//! There is no diffusion sampler here: a "timestep" is an index into a drift
//! schedule that scales designated activation channels, which is the only
//! property the temporal calibration depends on.

mod block;
mod calib;

pub use block::{
    forward_block, forward_block_with, gelu, init_block, BlockOutput, DiTBlockParams, ForwardHook, Layer,
    Linear, NoHook, SalienceProfile, Taps, QK_GAIN,
};
pub use calib::{
    challenge_report, collect_taps, gen_calibration, gen_inputs, quantile, BlockInput, CalibrationSet,
    ChallengeReport, TimestepDispersion, AMPLITUDE_JITTER, COND_STD,
};
