//! Metrics, win-ratio analyses, and diagnostic CSV exports.

use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::multiscale::build_pyramid;
use crate::spectral::dft_amplitude;
use crate::{cast, Scalar};

fn check_same_shape<T>(a: &ArrayView3<T>, b: &ArrayView3<T>, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// Mean squared error `1/(S·C)·ΣΣ (Y−Ŷ)²`, averaged over the batch.
pub fn mse<T: Scalar>(y_hat: &ArrayView3<T>, y: &ArrayView3<T>) -> Result<T> {
    check_same_shape(y_hat, y, "mse")?;
    let n = cast::<T>(y.len() as f64);
    let mut acc = T::zero();
    for (a, b) in y_hat.iter().zip(y.iter()) {
        let d = *a - *b;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Mean absolute error `1/(S·C)·ΣΣ |Y−Ŷ|`, averaged over the batch.
pub fn mae<T: Scalar>(y_hat: &ArrayView3<T>, y: &ArrayView3<T>) -> Result<T> {
    check_same_shape(y_hat, y, "mae")?;
    let n = cast::<T>(y.len() as f64);
    let mut acc = T::zero();
    for (a, b) in y_hat.iter().zip(y.iter()) {
        acc += (*a - *b).abs();
    }
    Ok(acc / n)
}

/// Per-sample MSE over each window's full `S × C` block.
pub fn per_sample_mse<T: Scalar>(y_hat: &ArrayView3<T>, y: &ArrayView3<T>) -> Result<Vec<T>> {
    check_same_shape(y_hat, y, "per_sample_mse")?;
    let (b, s, c) = y.dim();
    let denom = cast::<T>((s * c) as f64);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut acc = T::zero();
        for si in 0..s {
            for ch in 0..c {
                let d = y_hat[(bi, si, ch)] - y[(bi, si, ch)];
                acc += d * d;
            }
        }
        out.push(acc / denom);
    }
    Ok(out)
}

/// Per-sample error values for one labeled model.
#[derive(Debug, Clone)]
pub struct ErrorVector<T> {
    pub errors: Vec<T>,
    pub label: String,
}

/// Fraction of samples where the student's error is strictly below the
/// teacher's; ties count as losses.
pub fn win_ratio<T: Scalar>(e_s: &[T], e_t: &[T]) -> Result<f64> {
    if e_s.len() != e_t.len() {
        return Err(Error::shape(
            "win_ratio",
            format!("{} samples", e_s.len()),
            format!("{}", e_t.len()),
        ));
    }
    if e_s.is_empty() {
        return Err(Error::invalid("win_ratio needs at least one sample"));
    }
    let wins = e_s.iter().zip(e_t.iter()).filter(|(a, b)| a < b).count();
    Ok(wins as f64 / e_s.len() as f64)
}

/// Indices where the student strictly wins; input to [`win_keep`].
pub fn win_indices<T: Scalar>(e_s: &[T], e_t: &[T]) -> Vec<usize> {
    e_s.iter()
        .zip(e_t.iter())
        .enumerate()
        .filter_map(|(i, (a, b))| (a < b).then_some(i))
        .collect()
}

/// `|U_M ∩ U_T| / |U_M|`: the fraction of the baseline's winning windows
/// retained by the distilled model.
pub fn win_keep(u_m: &[usize], u_t: &[usize]) -> Result<f64> {
    if u_m.is_empty() {
        return Err(Error::invalid("win_keep requires a nonempty baseline win set"));
    }
    let t_set: std::collections::HashSet<usize> = u_t.iter().copied().collect();
    let kept = u_m.iter().filter(|i| t_set.contains(i)).count();
    Ok(kept as f64 / u_m.len() as f64)
}

/// Format a scalar with 12 significant digits for CSV exports.
fn fmt12<T: Scalar>(v: T) -> String {
    format!("{:.11e}", v.to_f64().unwrap_or(f64::NAN))
}

/// Export a prediction/truth pyramid as CSV rows
/// `(scale, t, channel, prediction, truth)`.
pub fn export_pyramid<T: Scalar>(
    y_hat: &ArrayView2<T>,
    y: &ArrayView2<T>,
    m: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    if y_hat.dim() != y.dim() {
        return Err(Error::shape(
            "export_pyramid",
            format!("{:?}", y.dim()),
            format!("{:?}", y_hat.dim()),
        ));
    }
    let pred = build_pyramid(y_hat, m)?;
    let truth = build_pyramid(y, m)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "scale,t,channel,prediction,truth")?;
    for (scale, (lp, lt)) in pred.levels().iter().zip(truth.levels().iter()).enumerate() {
        for t in 0..lp.nrows() {
            for ch in 0..lp.ncols() {
                writeln!(
                    w,
                    "{scale},{t},{ch},{},{}",
                    fmt12(lp[(t, ch)]),
                    fmt12(lt[(t, ch)])
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Export prediction/truth amplitude spectra as CSV rows
/// `(bin, period, channel, amp_prediction, amp_truth)` with
/// `period = ceil(S/bin)`.
pub fn export_spectrogram<T: Scalar>(
    y_hat: &ArrayView2<T>,
    y: &ArrayView2<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    if y_hat.dim() != y.dim() {
        return Err(Error::shape(
            "export_spectrogram",
            format!("{:?}", y.dim()),
            format!("{:?}", y_hat.dim()),
        ));
    }
    let sp_pred = dft_amplitude(y_hat)?;
    let sp_truth = dft_amplitude(y)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin,period,channel,amp_prediction,amp_truth")?;
    for k in 1..=sp_pred.num_bins() {
        for ch in 0..sp_pred.num_channels() {
            writeln!(
                w,
                "{k},{},{ch},{},{}",
                sp_pred.period_of_bin(k),
                fmt12(sp_pred.amp[(k - 1, ch)]),
                fmt12(sp_truth.amp[(k - 1, ch)])
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Metrics summary serialized by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_keep: Option<f64>,
}
