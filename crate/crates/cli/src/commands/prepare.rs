//! `prepare`: load or synthesize a dataset, split, standardize, and write the
//! dataset cache plus a JSON manifest.

use clap::Args;
use std::io::Write;
use std::path::PathBuf;

use tsdistill_core::dataio::{SeriesDataset, Split};
use tsdistill_core::{Error, Real, Result};

use crate::config::{dataset_path, manifest_path, write_json, ConfigOverrides, DirLock, Manifest, RunConfig, WindowCounts};

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output directory for the dataset cache and manifest
    #[arg(long)]
    pub out: PathBuf,
    /// Load a CSV dataset (header row; optional leading `date` column)
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset; spec string like `periods=24,96`
    #[arg(long, required_unless_present = "data")]
    pub synthetic: Option<String>,
    /// Synthetic series length [default: 4000]
    #[arg(long, default_value_t = 4000)]
    pub length: usize,
    /// Synthetic channel count [default: 3]
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Synthetic linear trend slope [default: 0]
    #[arg(long, default_value_t = 0.0)]
    pub trend_slope: f64,
    /// Synthetic Gaussian noise standard deviation [default: 0.3]
    #[arg(long, default_value_t = 0.3)]
    pub noise_std: f64,
    /// Split fractions `train,val,test` [default: 0.7,0.1,0.2]
    #[arg(long, conflicts_with = "split_ett")]
    pub split: Option<String>,
    /// ETT-style 12/4/4-month split; value is samples per day (24 hourly,
    /// 96 quarter-hourly)
    #[arg(long)]
    pub split_ett: Option<usize>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

fn parse_periods(spec: &str) -> Result<Vec<usize>> {
    let body = spec
        .strip_prefix("periods=")
        .ok_or_else(|| Error::InvalidArgument(format!("--synthetic expects `periods=p1,p2,...`, got \"{spec}\"")))?;
    body.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad period \"{p}\": {e}")))
        })
        .collect()
}

fn parse_ratios(spec: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "--split expects three comma-separated fractions, got \"{spec}\""
        )));
    }
    let mut vals = [0.0f64; 3];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("bad split fraction \"{p}\": {e}")))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

/// Write the standardized values as CSV with full `f64` round-trip precision.
fn write_dataset_csv(path: &std::path::Path, ds: &SeriesDataset<Real>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", ds.channel_names().join(","))?;
    for row in ds.values().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &PrepareArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&args.overrides, None)?;
    let _lock = DirLock::acquire(&args.out)?;

    let (ds, source) = if let Some(path) = &args.data {
        (
            SeriesDataset::<Real>::load_csv(path)?,
            format!("csv:{}", path.display()),
        )
    } else {
        let spec = args.synthetic.as_ref().expect("clap enforces source");
        let periods = parse_periods(spec)?;
        let ds = SeriesDataset::<Real>::synth_multiperiod(
            args.length,
            args.channels,
            &periods,
            args.trend_slope,
            args.noise_std,
            cfg.seed,
        )?;
        (
            ds,
            format!(
                "synthetic:periods={};length={};channels={};trend_slope={};noise_std={};seed={}",
                periods.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
                args.length,
                args.channels,
                args.trend_slope,
                args.noise_std,
                cfg.seed
            ),
        )
    };

    let (ds, convention) = if let Some(spd) = args.split_ett {
        (ds.split_ett_months(spd)?, format!("ett-months:{spd}"))
    } else {
        let ratios = match &args.split {
            Some(spec) => parse_ratios(spec)?,
            None => (0.7, 0.1, 0.2),
        };
        (
            ds.split_standard(ratios)?,
            format!("ratios:{},{},{}", ratios.0, ratios.1, ratios.2),
        )
    };
    let ds = ds.standardize()?;

    let (train_end, val_end) = ds.split_bounds().expect("split set");
    let windows = WindowCounts {
        train: ds.window_count(Split::Train, cfg.lookback, cfg.horizon)?,
        val: ds.window_count(Split::Val, cfg.lookback, cfg.horizon)?,
        test: ds.window_count(Split::Test, cfg.lookback, cfg.horizon)?,
    };
    let manifest = Manifest {
        source,
        l_total: ds.len_total(),
        channels: ds.channel_names().to_vec(),
        split_convention: convention,
        train_end,
        val_end,
        train_mean: ds.train_mean().unwrap().to_vec(),
        train_std: ds.train_std().unwrap().to_vec(),
        standardized: true,
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        windows,
    };

    write_dataset_csv(&dataset_path(&args.out), &ds)?;
    write_json(&manifest_path(&args.out), &manifest)?;
    println!(
        "prepared {} rows x {} channels; windows train/val/test = {}/{}/{}",
        manifest.l_total,
        manifest.channels.len(),
        manifest.windows.train,
        manifest.windows.val,
        manifest.windows.test
    );
    Ok(())
}
