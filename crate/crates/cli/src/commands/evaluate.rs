//! `eval`: run a checkpoint over one split and write a metrics summary.

use clap::Args;
use std::path::PathBuf;

use tsdistill_core::dataio::{SeriesDataset, Split};
use tsdistill_core::eval::MetricsSummary;
use tsdistill_core::student::{forward, StudentParams};
use tsdistill_core::{Real, Result};

use crate::commands::distill::checkpoint_path;
use crate::config::{load_prepared, write_json, DirLock};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory holding the prepared dataset
    #[arg(long)]
    pub out: PathBuf,
    /// Student checkpoint [default: <out>/student.tdstu]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate: train | val | test [default: test]
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluation batch size [default: 32]
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

/// Accumulated squared/absolute errors of a checkpoint over a whole split.
pub fn split_metrics(
    ds: &SeriesDataset<Real>,
    params: &StudentParams<Real>,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64, usize, Vec<f64>)> {
    let (t, s) = (params.lookback(), params.horizon());
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut count = 0usize;
    let mut per_sample = Vec::new();
    for batch in ds.windows(split, t, s, batch_size)? {
        let out = forward(params, &batch.x.view())?;
        for (a, b) in out.y_hat.iter().zip(batch.y.iter()) {
            let d = a - b;
            sq += d * d;
            ab += d.abs();
        }
        count += batch.y.len();
        per_sample.extend(tsdistill_core::eval::per_sample_mse(
            &out.y_hat.view(),
            &batch.y.view(),
        )?);
    }
    Ok((sq / count as f64, ab / count as f64, per_sample.len(), per_sample))
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let split = Split::from_id(&args.split)?;
    let _lock = DirLock::acquire(&args.out)?;
    let (ds, _) = load_prepared(&args.out)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| checkpoint_path(&args.out));
    let params = StudentParams::<Real>::load_checkpoint(&ckpt)?;

    let started = std::time::Instant::now();
    let (mse, mae, n_windows, _) = split_metrics(&ds, &params, split, args.batch_size)?;
    let inference = started.elapsed().as_secs_f64();
    let summary = MetricsSummary {
        mse,
        mae,
        n_windows,
        horizon: params.horizon(),
        win_ratio: None,
        win_keep: None,
    };
    write_json(&args.out.join(format!("metrics_{}.json", split.id())), &summary)?;
    println!("{} mse {:.6} mae {:.6} over {} windows", split.id(), mse, mae, n_windows);
    println!(
        "model: {} parameters; inference {:.3}s ({:.3} ms/window)",
        params.param_count(),
        inference,
        1e3 * inference / n_windows as f64
    );
    Ok(())
}
