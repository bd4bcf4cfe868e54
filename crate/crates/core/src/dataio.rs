//! Dataset loading, synthesis, standardization, splitting, and windowing.
//!
//! A [`SeriesDataset`] is immutable once built; every operation returns a new
//! dataset. Splits never overlap and sliding windows never straddle a split
//! boundary.

use ndarray::{Array1, Array2, Array3, ArrayView2, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Floor added to the fitted per-channel standard deviation.
pub const STD_EPS: f64 = 1e-8;

/// One of the three contiguous dataset segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn id(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split \"{other}\""))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Multivariate series `[L_total × C]` with split boundaries and per-channel
/// train statistics.
#[derive(Debug, Clone)]
pub struct SeriesDataset<T> {
    values: Array2<T>,
    channel_names: Vec<String>,
    split: Option<(usize, usize)>,
    train_mean: Option<Array1<T>>,
    train_std: Option<Array1<T>>,
    standardized: bool,
}

/// Paired lookback/horizon tensors for a batch of stride-1 windows.
///
/// Window `b` covers rows `[start_b, start_b + T)` (lookback) and
/// `[start_b + T, start_b + T + S)` (horizon) of the dataset.
#[derive(Debug, Clone)]
pub struct WindowBatch<T> {
    /// Lookbacks, `[B × T × C]`.
    pub x: Array3<T>,
    /// Horizons, `[B × S × C]`.
    pub y: Array3<T>,
    /// Absolute start row of each window's lookback.
    pub window_starts: Vec<usize>,
    /// Stride-1 window ordinal within the split (used for teacher alignment).
    pub window_indices: Vec<usize>,
}

impl<T> WindowBatch<T> {
    pub fn len(&self) -> usize {
        self.window_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_starts.is_empty()
    }
}

impl<T: Scalar> SeriesDataset<T> {
    /// Build a dataset from an in-memory matrix, validating finiteness.
    pub fn from_values(values: Array2<T>, channel_names: Vec<String>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::invalid(format!(
                "dataset needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if channel_names.len() != values.ncols() {
            return Err(Error::shape(
                "from_values",
                format!("{} channel names", values.ncols()),
                format!("{}", channel_names.len()),
            ));
        }
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: r + 1,
                    column: channel_names[c].clone(),
                });
            }
        }
        Ok(SeriesDataset {
            values,
            channel_names,
            split: None,
            train_mean: None,
            train_std: None,
            standardized: false,
        })
    }

    /// Load a UTF-8, comma-separated file with a header row. A leading column
    /// named `date` is dropped; every remaining cell must parse as a finite
    /// real with `.` as the decimal point.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::CsvParse {
                    row: 0,
                    column: "<file>".to_string(),
                    message: format!("{other:?}"),
                },
            })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::CsvParse {
                row: 0,
                column: "<header>".to_string(),
                message: e.to_string(),
            })?
            .clone();
        let mut names: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        let skip_date = names.first().map(|n| n == "date").unwrap_or(false);
        if skip_date {
            names.remove(0);
        }
        if names.is_empty() {
            return Err(Error::invalid("csv has no value columns"));
        }

        let mut rows: Vec<T> = Vec::new();
        let mut n_rows = 0usize;
        for (i, record) in reader.records().enumerate() {
            let row_no = i + 1;
            let record = record.map_err(|e| Error::CsvParse {
                row: row_no,
                column: "<record>".to_string(),
                message: e.to_string(),
            })?;
            let offset = usize::from(skip_date);
            if record.len() != names.len() + offset {
                return Err(Error::CsvParse {
                    row: row_no,
                    column: "<record>".to_string(),
                    message: format!(
                        "expected {} fields, got {}",
                        names.len() + offset,
                        record.len()
                    ),
                });
            }
            for (j, cell) in record.iter().skip(offset).enumerate() {
                let v: f64 = cell.parse().map_err(|e| Error::CsvParse {
                    row: row_no,
                    column: names[j].clone(),
                    message: format!("{e}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row_no,
                        column: names[j].clone(),
                    });
                }
                rows.push(cast::<T>(v));
            }
            n_rows += 1;
        }
        if n_rows < 2 {
            return Err(Error::invalid(format!(
                "csv needs at least 2 data rows, got {n_rows}"
            )));
        }
        let values = Array2::from_shape_vec((n_rows, names.len()), rows)
            .expect("row-major cell buffer matches dimensions");
        SeriesDataset::from_values(values, names)
    }

    /// Deterministic synthetic series: per channel a sum of seeded random-phase
    /// sinusoids at the given periods, plus a linear trend and Gaussian noise.
    pub fn synth_multiperiod(
        l_total: usize,
        channels: usize,
        periods: &[usize],
        trend_slope: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::invalid("periods must be nonempty"));
        }
        let max_p = *periods.iter().max().unwrap();
        if l_total < 4 * max_p {
            return Err(Error::invalid(format!(
                "l_total={l_total} is shorter than 4×max(period)={}",
                4 * max_p
            )));
        }
        if channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // amplitudes and phases first, then noise, in a fixed draw order;
        // amplitude scales with the period so longer cycles carry more power,
        // as in natural series
        let mut amps = vec![vec![0.0f64; periods.len()]; channels];
        let mut phases = vec![vec![0.0f64; periods.len()]; channels];
        for c in 0..channels {
            for (pi, &p) in periods.iter().enumerate() {
                amps[c][pi] = rng.random_range(0.5..1.5) * p as f64 / max_p as f64;
                phases[c][pi] = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
        let normal = StandardNormal;
        let mut values = Array2::zeros((l_total, channels));
        for t in 0..l_total {
            for c in 0..channels {
                let mut v = trend_slope * t as f64;
                for (pi, &p) in periods.iter().enumerate() {
                    v += amps[c][pi]
                        * (std::f64::consts::TAU * t as f64 / p as f64 + phases[c][pi]).sin();
                }
                if noise_std > 0.0 {
                    let z: f64 = normal.sample(&mut rng);
                    v += noise_std * z;
                }
                values[(t, c)] = cast::<T>(v);
            }
        }
        let names = (0..channels).map(|c| format!("ch{c}")).collect();
        SeriesDataset::from_values(values, names)
    }

    pub fn len_total(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn split_bounds(&self) -> Option<(usize, usize)> {
        self.split
    }

    pub fn train_mean(&self) -> Option<&Array1<T>> {
        self.train_mean.as_ref()
    }

    /// Fitted per-channel population standard deviation, floored by
    /// [`STD_EPS`] so it is strictly positive.
    pub fn train_std(&self) -> Option<&Array1<T>> {
        self.train_std.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    fn fit_train_stats(&mut self) {
        let (train_end, _) = self.split.expect("split set before fitting");
        let train = self.values.slice(s![..train_end, ..]);
        let n = cast::<T>(train_end as f64);
        let c = self.num_channels();
        let mut mean = Array1::zeros(c);
        let mut std = Array1::zeros(c);
        for ch in 0..c {
            let col = train.column(ch);
            let m: T = col.sum() / n;
            let var: T = col.iter().map(|v| (*v - m) * (*v - m)).sum::<T>() / n;
            mean[ch] = m;
            std[ch] = var.sqrt() + cast::<T>(STD_EPS);
        }
        self.train_mean = Some(mean);
        self.train_std = Some(std);
    }

    /// Split by fractions `(train, val, test)`; all must be positive and sum
    /// to 1 within 1e-9. Fits per-channel statistics on the train rows.
    pub fn split_standard(mut self, ratios: (f64, f64, f64)) -> Result<Self> {
        let (rt, rv, rs) = ratios;
        if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
            return Err(Error::invalid(format!(
                "split ratios must all be positive, got ({rt}, {rv}, {rs})"
            )));
        }
        if (rt + rv + rs - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios must sum to 1, got {}",
                rt + rv + rs
            )));
        }
        let l = self.len_total();
        let train_end = (l as f64 * rt).floor() as usize;
        let val_end = train_end + (l as f64 * rv).floor() as usize;
        if train_end == 0 || val_end <= train_end || val_end >= l {
            return Err(Error::invalid(format!(
                "degenerate split ({train_end}, {val_end}) for {l} rows"
            )));
        }
        self.split = Some((train_end, val_end));
        self.fit_train_stats();
        Ok(self)
    }

    /// The 12/4/4-calendar-month split convention used by the ETT datasets:
    /// with `samples_per_day` samples per day, the train segment is
    /// `12·30·samples_per_day` rows and val/test are `4·30·samples_per_day`
    /// rows each, clipped to the dataset length.
    pub fn split_ett_months(mut self, samples_per_day: usize) -> Result<Self> {
        if samples_per_day == 0 {
            return Err(Error::invalid("samples_per_day must be positive"));
        }
        let month = 30 * samples_per_day;
        let l = self.len_total();
        let train_end = 12 * month;
        let val_end = train_end + 4 * month;
        let test_end = (val_end + 4 * month).min(l);
        if val_end >= test_end || train_end >= l {
            return Err(Error::invalid(format!(
                "ETT split (12/4/4 months at {samples_per_day}/day) does not fit {l} rows"
            )));
        }
        self.split = Some((train_end, val_end));
        self.fit_train_stats();
        Ok(self)
    }

    /// Global z-score with the fitted train statistics. Callable at most once.
    pub fn standardize(mut self) -> Result<Self> {
        if self.standardized {
            return Err(Error::invalid("dataset is already standardized"));
        }
        let mean = self
            .train_mean
            .clone()
            .ok_or_else(|| Error::invalid("standardize requires a fitted split"))?;
        let std = self.train_std.clone().unwrap();
        for ((_, c), v) in self.values.indexed_iter_mut() {
            *v = (*v - mean[c]) / std[c];
        }
        self.standardized = true;
        Ok(self)
    }

    /// Invert [`standardize`] using the stored statistics.
    pub fn destandardize(mut self) -> Result<Self> {
        if !self.standardized {
            return Err(Error::invalid("dataset is not standardized"));
        }
        let mean = self.train_mean.clone().unwrap();
        let std = self.train_std.clone().unwrap();
        for ((_, c), v) in self.values.indexed_iter_mut() {
            *v = *v * std[c] + mean[c];
        }
        self.standardized = false;
        Ok(self)
    }

    /// Restore split and statistics recorded elsewhere (e.g. a manifest).
    pub fn with_restored_state(
        mut self,
        split: (usize, usize),
        train_mean: Array1<T>,
        train_std: Array1<T>,
        standardized: bool,
    ) -> Result<Self> {
        let l = self.len_total();
        if !(0 < split.0 && split.0 < split.1 && split.1 < l) {
            return Err(Error::invalid(format!(
                "invalid split bounds {split:?} for {l} rows"
            )));
        }
        if train_mean.len() != self.num_channels() || train_std.len() != self.num_channels() {
            return Err(Error::shape(
                "with_restored_state",
                format!("{} channels", self.num_channels()),
                format!("{}/{}", train_mean.len(), train_std.len()),
            ));
        }
        self.split = Some(split);
        self.train_mean = Some(train_mean);
        self.train_std = Some(train_std);
        self.standardized = standardized;
        Ok(self)
    }

    /// Row range `[begin, end)` of a split segment.
    pub fn segment_bounds(&self, split: Split) -> Result<(usize, usize)> {
        let (train_end, val_end) = self
            .split
            .ok_or_else(|| Error::invalid("dataset has no split"))?;
        Ok(match split {
            Split::Train => (0, train_end),
            Split::Val => (train_end, val_end),
            Split::Test => (val_end, self.len_total()),
        })
    }

    pub fn segment(&self, split: Split) -> Result<ArrayView2<'_, T>> {
        let (b, e) = self.segment_bounds(split)?;
        Ok(self.values.slice(s![b..e, ..]))
    }

    /// Number of stride-1 windows `N = L_seg - T - S + 1` in a split.
    pub fn window_count(&self, split: Split, t: usize, s: usize) -> Result<usize> {
        let (b, e) = self.segment_bounds(split)?;
        let seg = e - b;
        if seg < t + s {
            return Err(Error::invalid(format!(
                "split {split} has {seg} rows, shorter than T+S={}",
                t + s
            )));
        }
        Ok(seg - t - s + 1)
    }

    /// Gather specific stride-1 windows (by split-relative index) of a split.
    pub fn gather_windows(
        &self,
        split: Split,
        t: usize,
        s: usize,
        indices: &[usize],
    ) -> Result<WindowBatch<T>> {
        let (begin, _) = self.segment_bounds(split)?;
        let n = self.window_count(split, t, s)?;
        let c = self.num_channels();
        let b = indices.len();
        let mut x = Array3::zeros((b, t, c));
        let mut y = Array3::zeros((b, s, c));
        let mut starts = Vec::with_capacity(b);
        for (bi, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::invalid(format!(
                    "window index {idx} out of range for split {split} with {n} windows"
                )));
            }
            let start = begin + idx;
            x.slice_mut(s![bi, .., ..])
                .assign(&self.values.slice(s![start..start + t, ..]));
            y.slice_mut(s![bi, .., ..])
                .assign(&self.values.slice(s![start + t..start + t + s, ..]));
            starts.push(start);
        }
        Ok(WindowBatch {
            x,
            y,
            window_starts: starts,
            window_indices: indices.to_vec(),
        })
    }

    /// All windows of a split in ascending order, chunked into batches of at
    /// most `batch_size`.
    pub fn windows(
        &self,
        split: Split,
        t: usize,
        s: usize,
        batch_size: usize,
    ) -> Result<Vec<WindowBatch<T>>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let n = self.window_count(split, t, s)?;
        let all: Vec<usize> = (0..n).collect();
        all.chunks(batch_size)
            .map(|chunk| self.gather_windows(split, t, s, chunk))
            .collect()
    }
}
