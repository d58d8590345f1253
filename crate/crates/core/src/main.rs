//! CLI around the calibration pipeline.
//!
//! Exit codes: 0 success, 2 configuration/argument errors, 3 file-format or
//! I/O errors, 4 invalid stage order or state, 5 internal dimension or
//! invariant violations. Every failure also writes a single-line error.json
//! into the output directory.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use stq::error::Result;
use stq::pipeline::{
    run_all, stage_allocate_ranks, stage_calibrate, stage_evaluate, stage_refine, stage_report,
    stage_train_lba, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "stq", about = "Low-bit quantization pipeline for a toy spatio-temporal denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// JSON config file (flat keys; flags below override its values)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weight and activation bit width (4, 6, 8, or 32)
    #[arg(long, global = true)]
    bits: Option<u8>,
    /// Weight bit width, overrides --bits
    #[arg(long, global = true)]
    bits_w: Option<u8>,
    /// Activation bit width, overrides --bits
    #[arg(long, global = true)]
    bits_a: Option<u8>,
    /// Seed for the backbone, calibration videos, and rotations
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Existing calibration file to load instead of generating one
    #[arg(long, global = true)]
    calib: Option<PathBuf>,
    /// Rank allocation mode: stca, fixed, or none
    #[arg(long, global = true)]
    rank_mode: Option<String>,
    /// Rank used when --rank-mode fixed
    #[arg(long, global = true)]
    fixed_rank: Option<usize>,
    /// Disable the Hadamard rotation
    #[arg(long, global = true)]
    no_rotate: bool,
    /// Skip the refinement stage (it still writes its checkpoint)
    #[arg(long, global = true)]
    no_refine: bool,
    /// Skip bias-alignment training (it still writes its checkpoint)
    #[arg(long, global = true)]
    no_lba: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Capture (or load) the calibration set and write the initial checkpoint
    Calibrate,
    /// Stage 1: complexity-aware rank allocation and quantizer calibration
    AllocateRanks,
    /// Stage 2: low-rank factor refinement
    Refine,
    /// Stage 3: learnable bias alignment
    TrainLba,
    /// Output-fidelity metrics vs the FP model on a held-out eval set
    Evaluate,
    /// Full JSON report: eval metrics, compression accounting, stage logs
    Report,
    /// All stages in order, then the report
    RunAll,
}

fn build_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(b) = o.bits {
        cfg.bits_w = b;
        cfg.bits_a = b;
    }
    if let Some(b) = o.bits_w {
        cfg.bits_w = b;
    }
    if let Some(b) = o.bits_a {
        cfg.bits_a = b;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(c) = &o.calib {
        cfg.calib_path = Some(c.clone());
    }
    if let Some(m) = &o.rank_mode {
        cfg.rank_mode = m.clone();
    }
    if let Some(r) = o.fixed_rank {
        cfg.fixed_rank = r;
    }
    if o.no_rotate {
        cfg.rotate = false;
    }
    if o.no_refine {
        cfg.refine_enabled = false;
    }
    if o.no_lba {
        cfg.lba_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = build_config(&cli.overrides)?;
    match cli.command {
        Command::Calibrate => stage_calibrate(&cfg)?,
        Command::AllocateRanks => stage_allocate_ranks(&cfg)?,
        Command::Refine => stage_refine(&cfg)?,
        Command::TrainLba => stage_train_lba(&cfg)?,
        Command::Evaluate => {
            let m = stage_evaluate(&cfg)?;
            println!("{}", serde_json::to_string(&m).unwrap());
        }
        Command::Report => {
            stage_report(&cfg, &serde_json::Value::Null)?;
            println!("report written to {}", cfg.report_file().display());
        }
        Command::RunAll => {
            run_all(&cfg)?;
            println!("report written to {}", cfg.report_file().display());
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {}", e);
            // machine-parsable error record next to the other artifacts
            let out = cli
                .overrides
                .out
                .clone()
                .unwrap_or_else(|| PipelineConfig::default().out_dir);
            if std::fs::create_dir_all(&out).is_ok() {
                let line = serde_json::json!({ "error": e.to_string(), "code": code });
                let _ = std::fs::write(out.join("error.json"), format!("{}\n", line));
            }
            ExitCode::from(code as u8)
        }
    }
}
