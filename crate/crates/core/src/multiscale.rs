//! Stride-2 downsampling pyramids and the multi-scale matching loss.
//!
//! Downsampling is a fixed averaging kernel `[1/2, 1/2]` with stride 2 and no
//! padding; an unpaired trailing element of an odd-length level is dropped.
//! The kernel is fixed rather than learned so the distillation target stays
//! deterministic.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// A signal together with its iterated stride-2 downsamplings.
///
/// `levels()[0]` is the unmodified input; level `m` has `floor(L/2^m)` rows.
#[derive(Debug, Clone)]
pub struct ScalePyramid<T> {
    levels: Vec<Array2<T>>,
}

impl<T: Scalar> ScalePyramid<T> {
    pub fn levels(&self) -> &[Array2<T>] {
        &self.levels
    }

    /// Number of downsampling steps M (the pyramid has M+1 levels).
    pub fn num_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_channels(&self) -> usize {
        self.levels[0].ncols()
    }
}

/// Average adjacent pairs of rows: `out[i] = (x[2i] + x[2i+1]) / 2`.
pub fn downsample<T: Scalar>(x: &ArrayView2<T>) -> Result<Array2<T>> {
    let (l, c) = x.dim();
    if l < 2 {
        return Err(Error::invalid(format!(
            "downsample requires at least 2 rows, got {l}"
        )));
    }
    let half = cast::<T>(0.5);
    let out_len = l / 2;
    let mut out = Array2::zeros((out_len, c));
    for i in 0..out_len {
        for ch in 0..c {
            out[(i, ch)] = (x[(2 * i, ch)] + x[(2 * i + 1, ch)]) * half;
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample`]: scatter each output gradient back to the two
/// input rows it averaged, with weight 1/2. Rows beyond `2·(L/2)` (the dropped
/// trailing element of an odd-length input) receive zero.
pub fn downsample_adjoint<T: Scalar>(g: &ArrayView2<T>, input_len: usize) -> Array2<T> {
    let (out_len, c) = g.dim();
    debug_assert_eq!(out_len, input_len / 2);
    let half = cast::<T>(0.5);
    let mut gx = Array2::zeros((input_len, c));
    for i in 0..out_len {
        for ch in 0..c {
            let v = g[(i, ch)] * half;
            gx[(2 * i, ch)] = v;
            gx[(2 * i + 1, ch)] = v;
        }
    }
    gx
}

/// Iterated downsampling: levels `0..=m`, level 0 being the input itself.
pub fn build_pyramid<T: Scalar>(x: &ArrayView2<T>, m: usize) -> Result<ScalePyramid<T>> {
    let l = x.nrows();
    if l >> m == 0 {
        return Err(Error::invalid(format!(
            "pyramid with M={m} steps would empty a length-{l} signal"
        )));
    }
    let mut levels = Vec::with_capacity(m + 1);
    levels.push(x.to_owned());
    for _ in 0..m {
        let next = downsample(&levels.last().unwrap().view())?;
        levels.push(next);
    }
    Ok(ScalePyramid { levels })
}

fn check_compatible<T: Scalar>(a: &ScalePyramid<T>, b: &ScalePyramid<T>) -> Result<()> {
    if a.levels.len() != b.levels.len() {
        return Err(Error::shape(
            "scale_loss",
            format!("{} levels", a.levels.len()),
            format!("{} levels", b.levels.len()),
        ));
    }
    for (m, (la, lb)) in a.levels.iter().zip(b.levels.iter()).enumerate() {
        if la.dim() != lb.dim() {
            return Err(Error::shape(
                format!("scale_loss level {m}"),
                format!("{:?}", la.dim()),
                format!("{:?}", lb.dim()),
            ));
        }
    }
    Ok(())
}

/// Multi-scale matching loss: mean over levels of the per-level mean squared
/// difference, each level averaged over its own elements.
pub fn scale_loss<T: Scalar>(p_t: &ScalePyramid<T>, p_s: &ScalePyramid<T>) -> Result<T> {
    check_compatible(p_t, p_s)?;
    let m1 = cast::<T>(p_t.levels.len() as f64);
    let mut total = T::zero();
    for (lt, ls) in p_t.levels.iter().zip(p_s.levels.iter()) {
        let n = cast::<T>(lt.len() as f64);
        let mut acc = T::zero();
        for (a, b) in lt.iter().zip(ls.iter()) {
            let d = *a - *b;
            acc += d * d;
        }
        total += acc / n;
    }
    Ok(total / m1)
}

/// [`scale_loss`] plus its gradient with respect to the level-0 input of the
/// student-side pyramid `p_s`. The gradient with respect to the other side's
/// input is the elementwise negation.
pub fn scale_loss_grad<T: Scalar>(
    p_t: &ScalePyramid<T>,
    p_s: &ScalePyramid<T>,
) -> Result<(T, Array2<T>)> {
    check_compatible(p_t, p_s)?;
    let m = p_t.num_steps();
    let m1 = cast::<T>((m + 1) as f64);
    let two = cast::<T>(2.0);

    let mut total = T::zero();
    let mut level_grads: Vec<Array2<T>> = Vec::with_capacity(m + 1);
    for (lt, ls) in p_t.levels.iter().zip(p_s.levels.iter()) {
        let n = cast::<T>(lt.len() as f64);
        let mut g = Array2::zeros(lt.dim());
        let mut acc = T::zero();
        for ((idx, a), b) in lt.indexed_iter().zip(ls.iter()) {
            let d = *b - *a; // student minus teacher
            acc += d * d;
            g[idx] = two * d / (n * m1);
        }
        total += acc / n;
        level_grads.push(g);
    }

    // reverse accumulation through the downsampling chain
    let mut acc = level_grads.pop().unwrap();
    for level in (0..m).rev() {
        let input_len = p_s.levels[level].nrows();
        let mut up = downsample_adjoint(&acc.view(), input_len);
        up += &level_grads.pop().unwrap();
        acc = up;
    }
    Ok((total / m1, acc))
}
