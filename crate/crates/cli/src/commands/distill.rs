//! `distill`: train the student against a frozen teacher and write the
//! checkpoint, the training report, and the echoed run configuration.

use clap::Args;
use std::path::PathBuf;

use tsdistill_core::dataio::Split;
use tsdistill_core::trainer::train_distill;
use tsdistill_core::Result;

use crate::commands::teacher_source::{build_teacher, TeacherSpec};
use crate::config::{load_prepared, write_json, ConfigOverrides, DirLock, RunConfig};

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Output directory holding the prepared dataset
    #[arg(long)]
    pub out: PathBuf,
    /// Teacher source: `artifact`, `linear[:lambda=X]`, or `oracle[:sigma=X]`
    /// [default: artifact]
    #[arg(long, default_value = "artifact")]
    pub teacher: String,
    /// Teacher feature dimension D_t for on-the-fly teachers [default: 64]
    #[arg(long, default_value_t = 64)]
    pub d_t: usize,
    /// Seed for on-the-fly teacher streams [default: 1234]
    #[arg(long, default_value_t = 1234)]
    pub teacher_seed: u64,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn checkpoint_path(out_dir: &std::path::Path) -> PathBuf {
    out_dir.join("student.tdstu")
}

pub fn run(args: &DistillArgs) -> Result<()> {
    let spec = TeacherSpec::parse(&args.teacher)?;
    let _lock = DirLock::acquire(&args.out)?;
    let (ds, manifest) = load_prepared(&args.out)?;
    let cfg = RunConfig::resolve(&args.overrides, Some((manifest.lookback, manifest.horizon)))?;
    let distill_cfg = cfg.distill_config()?;
    let train_cfg = cfg.train_config();

    let teacher = build_teacher(
        &spec,
        &args.out,
        &ds,
        &[Split::Train, Split::Val],
        cfg.lookback,
        cfg.horizon,
        args.d_t,
        args.teacher_seed,
    )?;

    let (student, _regressor, report) = train_distill(&ds, teacher.as_ref(), &distill_cfg, &train_cfg)?;

    student.save_checkpoint(checkpoint_path(&args.out))?;
    write_json(&args.out.join("run_config.json"), &cfg)?;
    std::fs::write(args.out.join("train_report.json"), report.to_json() + "\n")?;
    println!(
        "trained {} epochs (best {}), stopped_early={}, test mse {:.6} mae {:.6}",
        report.epochs.len(),
        report.best_epoch,
        report.stopped_early,
        report.test_mse,
        report.test_mae
    );
    println!("student parameters: {}", student.param_count());
    Ok(())
}
