//! Run configuration: built-in defaults, flat config-file overrides, then
//! command-line flags, in increasing precedence. The `TD_SEED` environment
//! variable overrides the default seed but yields to explicit configuration.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use tsdistill_core::dataio::SeriesDataset;
use tsdistill_core::distill::DistillConfig;
use tsdistill_core::student::NormMode;
use tsdistill_core::trainer::TrainConfig;
use tsdistill_core::{Error, Real, Result};

/// Fully resolved run-level settings, echoed into `run_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub m: usize,
    pub d: usize,
    pub kernel: usize,
    pub norm: String,
    pub lookback: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub no_pred_level: bool,
    pub no_feat_level: bool,
    pub no_multi_scale: bool,
    pub no_multi_period: bool,
    pub no_sup: bool,
    pub gt_pattern: bool,
    pub regressor_stop_grad: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.1,
            beta: 0.5,
            tau: 0.5,
            m: 3,
            d: 512,
            kernel: 25,
            norm: "non-stationary".to_string(),
            lookback: 720,
            horizon: 96,
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            patience: 5,
            seed: 0,
            no_pred_level: false,
            no_feat_level: false,
            no_multi_scale: false,
            no_multi_period: false,
            no_sup: false,
            gt_pattern: false,
            regressor_stop_grad: false,
        }
    }
}

/// Optional overrides gathered from the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    /// Flat `key = value` config file (flags take precedence)
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    /// Prediction-level distillation weight [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Feature-level distillation weight [default: 0.5]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Softmax temperature for period distributions [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of downsampling steps [default: 3]
    #[arg(long, short = 'M')]
    pub m: Option<usize>,
    /// Student hidden dimension [default: 512]
    #[arg(long, short = 'D')]
    pub d: Option<usize>,
    /// Decomposition kernel size, odd [default: 25]
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Normalization mode: non-stationary | revin [default: non-stationary]
    #[arg(long)]
    pub norm: Option<String>,
    /// Lookback length T [default: manifest value, else 720]
    #[arg(long, short = 'T')]
    pub lookback: Option<usize>,
    /// Horizon S [default: manifest value, else 96]
    #[arg(long, short = 'S')]
    pub horizon: Option<usize>,
    /// Epoch budget [default: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Early-stopping patience in epochs [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// PRNG seed [default: 0; TD_SEED overrides the default]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable prediction-level distillation
    #[arg(long)]
    pub no_pred_level: bool,
    /// Disable feature-level distillation
    #[arg(long)]
    pub no_feat_level: bool,
    /// Disable multi-scale matching
    #[arg(long)]
    pub no_multi_scale: bool,
    /// Disable multi-period matching
    #[arg(long)]
    pub no_multi_period: bool,
    /// Disable the supervised loss
    #[arg(long)]
    pub no_sup: bool,
    /// Add ground-truth multi-scale/multi-period matching in place of plain
    /// supervision
    #[arg(long)]
    pub gt_pattern: bool,
    /// Freeze the feature regressor instead of training it jointly
    #[arg(long)]
    pub regressor_stop_grad: bool,
}

/// Parse a flat `key = value` config file; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{}:{}: expected `key = value`, got \"{raw}\"",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "tau",
    "m",
    "d",
    "kernel",
    "norm",
    "lookback",
    "horizon",
    "epochs",
    "batch_size",
    "lr",
    "patience",
    "seed",
    "no_pred_level",
    "no_feat_level",
    "no_multi_scale",
    "no_multi_period",
    "no_sup",
    "gt_pattern",
    "regressor_stop_grad",
];

fn parse_key<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|e| {
            Error::InvalidArgument(format!("config key \"{key}\": cannot parse \"{v}\": {e}"))
        }),
    }
}

impl RunConfig {
    /// defaults <- TD_SEED <- config file <- flags; `manifest_dims` supplies
    /// lookback/horizon recorded at prepare time.
    pub fn resolve(
        overrides: &ConfigOverrides,
        manifest_dims: Option<(usize, usize)>,
    ) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some((t, s)) = manifest_dims {
            cfg.lookback = t;
            cfg.horizon = s;
        }
        if let Ok(seed) = std::env::var("TD_SEED") {
            cfg.seed = seed.parse().map_err(|e| {
                Error::InvalidArgument(format!("TD_SEED: cannot parse \"{seed}\": {e}"))
            })?;
        }

        if let Some(path) = &overrides.config {
            let map = parse_config_file(path)?;
            for key in map.keys() {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "unknown config key \"{key}\" in {}",
                        path.display()
                    )));
                }
            }
            if let Some(v) = parse_key(&map, "alpha")? {
                cfg.alpha = v;
            }
            if let Some(v) = parse_key(&map, "beta")? {
                cfg.beta = v;
            }
            if let Some(v) = parse_key(&map, "tau")? {
                cfg.tau = v;
            }
            if let Some(v) = parse_key(&map, "m")? {
                cfg.m = v;
            }
            if let Some(v) = parse_key(&map, "d")? {
                cfg.d = v;
            }
            if let Some(v) = parse_key(&map, "kernel")? {
                cfg.kernel = v;
            }
            if let Some(v) = parse_key::<String>(&map, "norm")? {
                cfg.norm = v;
            }
            if let Some(v) = parse_key(&map, "lookback")? {
                cfg.lookback = v;
            }
            if let Some(v) = parse_key(&map, "horizon")? {
                cfg.horizon = v;
            }
            if let Some(v) = parse_key(&map, "epochs")? {
                cfg.epochs = v;
            }
            if let Some(v) = parse_key(&map, "batch_size")? {
                cfg.batch_size = v;
            }
            if let Some(v) = parse_key(&map, "lr")? {
                cfg.lr = v;
            }
            if let Some(v) = parse_key(&map, "patience")? {
                cfg.patience = v;
            }
            if let Some(v) = parse_key(&map, "seed")? {
                cfg.seed = v;
            }
            if let Some(v) = parse_key(&map, "no_pred_level")? {
                cfg.no_pred_level = v;
            }
            if let Some(v) = parse_key(&map, "no_feat_level")? {
                cfg.no_feat_level = v;
            }
            if let Some(v) = parse_key(&map, "no_multi_scale")? {
                cfg.no_multi_scale = v;
            }
            if let Some(v) = parse_key(&map, "no_multi_period")? {
                cfg.no_multi_period = v;
            }
            if let Some(v) = parse_key(&map, "no_sup")? {
                cfg.no_sup = v;
            }
            if let Some(v) = parse_key(&map, "gt_pattern")? {
                cfg.gt_pattern = v;
            }
            if let Some(v) = parse_key(&map, "regressor_stop_grad")? {
                cfg.regressor_stop_grad = v;
            }
        }

        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = overrides.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        flag!(alpha);
        flag!(beta);
        flag!(tau);
        flag!(m);
        flag!(d);
        flag!(kernel);
        flag!(norm);
        flag!(lookback);
        flag!(horizon);
        flag!(epochs);
        flag!(batch_size);
        flag!(lr);
        flag!(patience);
        flag!(seed);
        if overrides.no_pred_level {
            cfg.no_pred_level = true;
        }
        if overrides.no_feat_level {
            cfg.no_feat_level = true;
        }
        if overrides.no_multi_scale {
            cfg.no_multi_scale = true;
        }
        if overrides.no_multi_period {
            cfg.no_multi_period = true;
        }
        if overrides.no_sup {
            cfg.no_sup = true;
        }
        if overrides.gt_pattern {
            cfg.gt_pattern = true;
        }
        if overrides.regressor_stop_grad {
            cfg.regressor_stop_grad = true;
        }
        Ok(cfg)
    }

    pub fn norm_mode(&self) -> Result<NormMode> {
        NormMode::from_id(&self.norm)
    }

    pub fn distill_config(&self) -> Result<DistillConfig<Real>> {
        let mut cfg = DistillConfig::<Real>::new(self.lookback, self.horizon, self.d);
        cfg.alpha = self.alpha;
        cfg.beta = self.beta;
        cfg.tau = self.tau;
        cfg.m = self.m;
        cfg.use_pred_level = !self.no_pred_level;
        cfg.use_feat_level = !self.no_feat_level;
        cfg.use_scale = !self.no_multi_scale;
        cfg.use_period = !self.no_multi_period;
        cfg.use_sup = !self.no_sup;
        cfg.use_gt_pattern = self.gt_pattern;
        cfg.regressor_stop_grad = self.regressor_stop_grad;
        cfg.norm_mode = self.norm_mode()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

// ---------------------------------------------------------------------------
// dataset manifest
// ---------------------------------------------------------------------------

/// Per-split stride-1 window counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Metadata written by `prepare` next to the standardized dataset cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub l_total: usize,
    pub channels: Vec<String>,
    pub split_convention: String,
    pub train_end: usize,
    pub val_end: usize,
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
    pub standardized: bool,
    pub lookback: usize,
    pub horizon: usize,
    pub windows: WindowCounts,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

pub fn dataset_path(out_dir: &Path) -> PathBuf {
    out_dir.join("dataset.csv")
}

pub fn load_manifest(out_dir: &Path) -> Result<Manifest> {
    let path = manifest_path(out_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Format {
            path: path.display().to_string(),
            message: format!("cannot read manifest (run `prepare` first): {e}"),
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: format!("bad manifest: {e}"),
    })
}

/// Load the standardized dataset cache and restore split and statistics.
pub fn load_prepared(out_dir: &Path) -> Result<(SeriesDataset<Real>, Manifest)> {
    let manifest = load_manifest(out_dir)?;
    let ds = SeriesDataset::<Real>::load_csv(dataset_path(out_dir))?;
    let ds = ds.with_restored_state(
        (manifest.train_end, manifest.val_end),
        ndarray::Array1::from_vec(manifest.train_mean.clone()),
        ndarray::Array1::from_vec(manifest.train_std.clone()),
        manifest.standardized,
    )?;
    Ok((ds, manifest))
}

// ---------------------------------------------------------------------------
// output-directory lock
// ---------------------------------------------------------------------------

/// Exclusive lock on the output directory for the lifetime of a command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".tsdistill.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Format {
                path: path.display().to_string(),
                message: "output directory is locked by another run (remove the lock file if stale)"
                    .to_string(),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Serialize pretty JSON with a trailing newline (stable bytes).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
