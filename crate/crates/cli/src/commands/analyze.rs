//! `analyze`: win-ratio / win-keep statistics against a teacher plus
//! per-sample pyramid and spectrogram CSV exports.

use clap::Args;
use ndarray::s;
use std::path::PathBuf;

use tsdistill_core::dataio::Split;
use tsdistill_core::eval::{export_pyramid, export_spectrogram, per_sample_mse, win_indices, win_keep, win_ratio, MetricsSummary};
use tsdistill_core::student::{forward, StudentParams};
use tsdistill_core::{Error, Real, Result};

use crate::commands::distill::checkpoint_path;
use crate::commands::teacher_source::{build_teacher, TeacherSpec};
use crate::config::{load_prepared, write_json, ConfigOverrides, DirLock, RunConfig};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Output directory holding the prepared dataset
    #[arg(long)]
    pub out: PathBuf,
    /// Student checkpoint [default: <out>/student.tdstu]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Plain-student checkpoint; enables the win-keep statistic
    #[arg(long)]
    pub baseline_checkpoint: Option<PathBuf>,
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
    /// Split to analyze [default: test]
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Window index whose prediction is exported as pyramid/spectrogram CSVs
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    let split = Split::from_id(&args.split)?;
    let spec = TeacherSpec::parse(&args.teacher)?;
    let _lock = DirLock::acquire(&args.out)?;
    let (ds, manifest) = load_prepared(&args.out)?;
    let cfg = RunConfig::resolve(&args.overrides, Some((manifest.lookback, manifest.horizon)))?;

    let ckpt = args.checkpoint.clone().unwrap_or_else(|| checkpoint_path(&args.out));
    let params = StudentParams::<Real>::load_checkpoint(&ckpt)?;
    let (t, s_len) = (params.lookback(), params.horizon());

    let teacher = build_teacher(&spec, &args.out, &ds, &[split], t, s_len, args.d_t, args.teacher_seed)?;
    let n = ds.window_count(split, t, s_len)?;
    if args.sample >= n {
        return Err(Error::InvalidArgument(format!(
            "--sample {} out of range for {} windows",
            args.sample, n
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let windows = ds.gather_windows(split, t, s_len, &all)?;
    let student_out = forward(&params, &windows.x.view())?;
    let teacher_out = teacher.batch_outputs(split, &all, &windows.x.view())?;

    let e_student = per_sample_mse(&student_out.y_hat.view(), &windows.y.view())?;
    let e_teacher = per_sample_mse(&teacher_out.y_hat.view(), &windows.y.view())?;
    let ratio = win_ratio(&e_student, &e_teacher)?;

    let keep = match &args.baseline_checkpoint {
        None => None,
        Some(path) => {
            let baseline = StudentParams::<Real>::load_checkpoint(path)?;
            if baseline.lookback() != t || baseline.horizon() != s_len {
                return Err(Error::InvalidArgument(
                    "baseline checkpoint dimensions do not match the checkpoint under analysis".into(),
                ));
            }
            let base_out = forward(&baseline, &windows.x.view())?;
            let e_base = per_sample_mse(&base_out.y_hat.view(), &windows.y.view())?;
            let u_m = win_indices(&e_base, &e_teacher);
            let u_t = win_indices(&e_student, &e_teacher);
            Some(win_keep(&u_m, &u_t)?)
        }
    };

    let mse = tsdistill_core::eval::mse(&student_out.y_hat.view(), &windows.y.view())?;
    let mae = tsdistill_core::eval::mae(&student_out.y_hat.view(), &windows.y.view())?;
    let summary = MetricsSummary {
        mse,
        mae,
        n_windows: n,
        horizon: s_len,
        win_ratio: Some(ratio),
        win_keep: keep,
    };
    write_json(&args.out.join(format!("analysis_{}.json", split.id())), &summary)?;

    let pred = student_out.y_hat.slice(s![args.sample, .., ..]);
    let truth = windows.y.slice(s![args.sample, .., ..]);
    export_pyramid(&pred, &truth, cfg.m, args.out.join("pyramid.csv"))?;
    export_spectrogram(&pred, &truth, args.out.join("spectrogram.csv"))?;

    match keep {
        Some(k) => println!("win_ratio {ratio:.4} win_keep {k:.4} over {n} windows"),
        None => println!("win_ratio {ratio:.4} over {n} windows"),
    }
    Ok(())
}
