//! `gradcheck` and `verify-theorems`: contract checks with nonzero exit on
//! violation.

use clap::Args;
use serde::Serialize;
use std::path::PathBuf;

use tsdistill_core::distill::DistillConfig;
use tsdistill_core::trainer::{gradient_check_total_loss, theorem1_min_margin, theorem2_min_margin};
use tsdistill_core::{Real, Result};

use crate::config::{write_json, DirLock};

/// Threshold for the full-objective gradient check.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
/// Margin floor for the theorem verifiers.
pub const MARGIN_FLOOR: f64 = -1e-9;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Output directory for the report
    #[arg(long)]
    pub out: PathBuf,
    /// PRNG seed [default: 0]
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct GradcheckReport {
    max_rel_error: f64,
    threshold: f64,
    pass: bool,
}

/// Full-objective gradient check at the reference desk-scale shapes
/// (B=2, T=16, S=8, C=2, D=8, D_t=6, M=2, τ=0.5, α=β=1).
pub fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let _lock = DirLock::acquire(&args.out)?;
    let mut cfg = DistillConfig::<Real>::new(16, 8, 8);
    cfg.m = 2;
    cfg.tau = 0.5;
    cfg.alpha = 1.0;
    cfg.beta = 1.0;
    let max_rel = gradient_check_total_loss(&cfg, 2, 2, 6, 1e-5, 200, args.seed)?;
    let pass = max_rel < GRADCHECK_THRESHOLD;
    let report = GradcheckReport {
        max_rel_error: max_rel,
        threshold: GRADCHECK_THRESHOLD,
        pass,
    };
    write_json(&args.out.join("gradcheck.json"), &report)?;
    println!(
        "gradcheck max relative error {max_rel:.3e} (threshold {GRADCHECK_THRESHOLD:.0e}): {}",
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    /// Output directory for the report
    #[arg(long)]
    pub out: PathBuf,
    /// Number of random instances per theorem [default: 10000]
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// PRNG seed [default: 7]
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Serialize)]
struct TheoremReport {
    trials: usize,
    theorem1_min_margin: f64,
    theorem2_min_margin: f64,
    margin_floor: f64,
    pass: bool,
}

/// Randomized margin suites for the two mixup-bound inequalities.
pub fn run_theorems(args: &TheoremArgs) -> Result<bool> {
    let _lock = DirLock::acquire(&args.out)?;
    let m1 = theorem1_min_margin::<Real>(args.trials, &[0.1, 1.0, 10.0], &[0, 1, 3], args.seed);
    let m2 = theorem2_min_margin::<Real>(args.trials, &[0.5, 1.0, 2.0], args.seed.wrapping_add(1));
    let pass = m1 >= MARGIN_FLOOR && m2 >= MARGIN_FLOOR;
    let report = TheoremReport {
        trials: args.trials,
        theorem1_min_margin: m1,
        theorem2_min_margin: m2,
        margin_floor: MARGIN_FLOOR,
        pass,
    };
    write_json(&args.out.join("theorems.json"), &report)?;
    println!("theorem 1 min margin {m1:.3e} over {} trials", args.trials);
    println!("theorem 2 min margin {m2:.3e} over {} trials", args.trials);
    println!("margins >= {MARGIN_FLOOR:.0e}: {}", if pass { "pass" } else { "FAIL" });
    Ok(pass)
}
