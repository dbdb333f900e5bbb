use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sq::pipeline::{self, artifact_dir, PipelineConfig};
use sq::Result;

#[derive(Parser)]
#[command(name = "sq", version, about = "Salience-balanced post-training quantization for a diffusion-transformer block")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; overrides `output.artifacts` from the config.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tap calibration activations and estimate balancing factors.
    Calibrate(Common),
    /// Fold balancing into the block and quantize it.
    Quantize(Common),
    /// Compare the quantized block with full precision.
    Evaluate(Common),
    /// Write salience-versus-error tables for every layer.
    Challenge(Common),
    /// Check every invariant on the current artifacts (exit 2 on failure).
    Verify(Common),
}

fn load(c: &Common) -> Result<(PipelineConfig, PathBuf)> {
    let cfg = PipelineConfig::load(&c.config)?;
    let dir = artifact_dir(&cfg, c.artifacts.as_deref());
    Ok((cfg, dir))
}

fn show(dir: &Path, file: &str) -> String {
    dir.join(file).display().to_string()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Calibrate(c) => {
            let (cfg, dir) = load(&c)?;
            let cal = pipeline::run_calibrate(&cfg, &dir)?;
            for (l, lc) in &cal.layers {
                println!(
                    "{:<5} so {:.4} -> {:.4}  eta over {} timesteps",
                    l.name(),
                    lc.diagnostics.so_pre,
                    lc.diagnostics.so_post,
                    lc.weights.eta.len()
                );
            }
            println!("wrote {}", show(&dir, pipeline::CALIBRATION_FILE));
        }
        Command::Quantize(c) => {
            let (cfg, dir) = load(&c)?;
            let ckpt = pipeline::run_quantize(&cfg, &dir)?;
            println!(
                "W{} A{}: {} weight tensors quantized",
                cfg.quant.weight_bits,
                cfg.quant.act_bits,
                ckpt.weights.len()
            );
            println!("wrote {}", show(&dir, pipeline::CHECKPOINT_FILE));
        }
        Command::Evaluate(c) => {
            let (cfg, dir) = load(&c)?;
            let r = pipeline::run_evaluate(&cfg, &dir)?;
            for m in &r.layers {
                println!(
                    "{:<5} w_mse {:.4e}  a_mse {:.4e}  out_mse {:.4e}",
                    m.layer.name(),
                    m.w_mse,
                    m.a_mse,
                    m.out_mse
                );
            }
            println!(
                "block output mse {:.4e}, mean relative deviation {:.4e}",
                r.block.output_mse, r.block.relative_deviation.mean
            );
            if !r.fp_equivalence.passed {
                println!(
                    "warning: folded block deviates from the original by {:.3e} (tolerance {:.1e})",
                    r.fp_equivalence.max_rel_dev, r.fp_equivalence.tolerance
                );
            }
            println!("wrote {}", show(&dir, pipeline::REPORT_FILE));
        }
        Command::Challenge(c) => {
            let (cfg, dir) = load(&c)?;
            for (l, r) in pipeline::run_challenge(&cfg, &dir)? {
                println!(
                    "{:<5} rank corr: activation {:+.3}  weight {:+.3}",
                    l.name(),
                    r.act_rank_corr,
                    r.weight_rank_corr
                );
            }
            println!("wrote {}", show(&dir, pipeline::CHALLENGE_LAYERS_FILE));
        }
        Command::Verify(c) => {
            let (cfg, dir) = load(&c)?;
            let r = pipeline::run_verify(&cfg, &dir)?;
            for check in &r.checks {
                let tag = if check.passed { "ok  " } else { "FAIL" };
                println!("{tag} {:<22} {}", check.name, check.detail);
            }
            if !r.passed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
