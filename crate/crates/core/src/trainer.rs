//! Training loop, optimizer, gradient checking, and theorem verifiers.
//!
//! Gradients are assembled by reverse accumulation: every differentiable
//! stage (student forward, regressor, pyramid, spectral chain) exposes value
//! plus adjoint, and [`train_distill`] chains them per batch before an Adam
//! step. Early stopping monitors validation supervised MSE with a patience
//! window and the best-validation parameters are returned.
//!
//! [`verify_theorem1`] and [`verify_theorem2`] are executable forms of the
//! mixup-bound inequalities: the combined supervised-plus-distillation loss
//! upper-bounds the loss against targets mixed between ground truth and
//! teacher outputs. Each returns the inequality margin, which must never be
//! meaningfully negative.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::dataio::{SeriesDataset, Split};
use crate::distill::{DistillConfig, LossBreakdown, LossEngine};
use crate::error::{Error, Result};
use crate::student::{backward, forward, forward_cached, init_params, StudentGrads, StudentParams};
use crate::teacher::{Regressor, RegressorGrads, Teacher};
use crate::{cast, Scalar};

// ---------------------------------------------------------------------------
// parameter plumbing
// ---------------------------------------------------------------------------

/// Everything the optimizer updates: the student plus the feature regressor.
#[derive(Debug, Clone)]
pub struct TrainableParams<T> {
    pub student: StudentParams<T>,
    pub regressor: Regressor<T>,
}

/// Gradients mirroring [`TrainableParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub student: StudentGrads<T>,
    pub regressor: RegressorGrads<T>,
}

impl<T: Scalar> TrainableParams<T> {
    /// Named flat views of every parameter tensor, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut v: Vec<(&'static str, &mut [T])> = vec![
            ("w1_seasonal", self.student.w1_seasonal.as_slice_mut().unwrap()),
            ("b1_seasonal", self.student.b1_seasonal.as_slice_mut().unwrap()),
            ("w1_trend", self.student.w1_trend.as_slice_mut().unwrap()),
            ("b1_trend", self.student.b1_trend.as_slice_mut().unwrap()),
            ("w2", self.student.w2.as_slice_mut().unwrap()),
            ("b2", self.student.b2.as_slice_mut().unwrap()),
        ];
        if let Some(g) = self.student.revin_gamma.as_mut() {
            v.push(("revin_gamma", g.as_slice_mut().unwrap()));
        }
        if let Some(b) = self.student.revin_beta.as_mut() {
            v.push(("revin_beta", b.as_slice_mut().unwrap()));
        }
        v.push(("regressor_w", self.regressor.w.as_slice_mut().unwrap()));
        v.push(("regressor_b", self.regressor.b.as_slice_mut().unwrap()));
        v
    }
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &TrainableParams<T>) -> Self {
        ParamGrads {
            student: StudentGrads::zeros_like(&params.student),
            regressor: RegressorGrads::zeros_like(&params.regressor),
        }
    }

    /// Flat views in the same order as [`TrainableParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut v: Vec<(&'static str, &[T])> = vec![
            ("w1_seasonal", self.student.w1_seasonal.as_slice().unwrap()),
            ("b1_seasonal", self.student.b1_seasonal.as_slice().unwrap()),
            ("w1_trend", self.student.w1_trend.as_slice().unwrap()),
            ("b1_trend", self.student.b1_trend.as_slice().unwrap()),
            ("w2", self.student.w2.as_slice().unwrap()),
            ("b2", self.student.b2.as_slice().unwrap()),
        ];
        if let Some(g) = self.student.revin_gamma.as_ref() {
            v.push(("revin_gamma", g.as_slice().unwrap()));
        }
        if let Some(b) = self.student.revin_beta.as_ref() {
            v.push(("revin_beta", b.as_slice().unwrap()));
        }
        v.push(("regressor_w", self.regressor.w.as_slice().unwrap()));
        v.push(("regressor_b", self.regressor.b.as_slice().unwrap()));
        v
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer state (β₁=0.9, β₂=0.999, ε=1e-8).
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &mut TrainableParams<T>, lr: T) -> Self {
        let moments = params
            .tensors_mut()
            .iter()
            .map(|(_, t)| (vec![T::zero(); t.len()], vec![T::zero(); t.len()]))
            .collect();
        AdamState {
            lr,
            beta1: cast::<T>(0.9),
            beta2: cast::<T>(0.999),
            eps: cast::<T>(1e-8),
            step: 0,
            moments,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients, naming the
/// offending tensor.
pub fn adam_step<T: Scalar>(
    params: &mut TrainableParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();
    for ((param_entry, grad_entry), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.moments.iter_mut())
    {
        debug_assert_eq!(param_entry.0, grad_entry.0);
        let p = param_entry.1;
        let g = grad_entry.1;
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (one - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (one - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

/// Patience-based early stopping on a strictly-improving criterion.
pub struct EarlyStopper<T> {
    best: T,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
}

impl<T: Scalar> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best: T::infinity(),
            best_epoch: 0,
            since_best: 0,
            patience,
        }
    }

    /// Record an epoch's criterion; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: T) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> T {
        self.best
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Loop-level settings (epoch budget, batching, optimizer, patience, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            patience: 5,
            seed: 0,
        }
    }
}

/// Loss record of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord<T> {
    #[serde(flatten)]
    pub train: LossBreakdown<T>,
    pub val: LossBreakdown<T>,
    pub val_mse: T,
    pub seconds_per_epoch: f64,
}

/// Full history of a training run plus final test metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport<T> {
    pub epochs: Vec<EpochRecord<T>>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test_mse: T,
    pub test_mae: T,
}

impl<T: Scalar + Serialize> TrainReport<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Train the student (and regressor) against a frozen teacher.
///
/// Batches are shuffled by a seeded generator each epoch; after each epoch
/// the validation supervised MSE is evaluated and training stops once it has
/// not improved for `patience` epochs. Returns the parameters of the best
/// validation epoch.
pub fn train_distill<T: Scalar + Serialize>(
    data: &SeriesDataset<T>,
    teacher: &dyn Teacher<T>,
    cfg: &DistillConfig<T>,
    tc: &TrainConfig,
) -> Result<(StudentParams<T>, Regressor<T>, TrainReport<T>)> {
    cfg.validate()?;
    if tc.epochs == 0 || tc.batch_size == 0 || tc.patience == 0 {
        return Err(Error::invalid("epochs, batch_size, and patience must be positive"));
    }
    if tc.lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let engine = LossEngine::new(cfg.clone())?;
    let (t_len, s_len, d) = (cfg.t_len, cfg.s_len, cfg.d);
    let c = data.num_channels();
    let n_train = data.window_count(Split::Train, t_len, s_len)?;
    data.window_count(Split::Val, t_len, s_len)?;
    data.window_count(Split::Test, t_len, s_len)?;

    let student = init_params::<T>(t_len, s_len, d, c, cfg.norm_mode, 25, tc.seed)?;
    let regressor = Regressor::init(d, teacher.feature_dim(), tc.seed.wrapping_add(1));
    let mut params = TrainableParams { student, regressor };
    let mut adam = AdamState::new(&mut params, cast::<T>(tc.lr));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));

    let mut stopper = EarlyStopper::<T>::new(tc.patience);
    let mut best_params = params.clone();
    let mut stopped_early = false;
    let mut records: Vec<EpochRecord<T>> = Vec::new();

    let val_batches = data.windows(Split::Val, t_len, s_len, tc.batch_size)?;

    let mut indices: Vec<usize> = (0..n_train).collect();
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        indices.shuffle(&mut shuffle_rng);

        let mut train_bd = LossBreakdown::<T>::zero();
        for (batch_no, chunk) in indices.chunks(tc.batch_size).enumerate() {
            let batch = data.gather_windows(Split::Train, t_len, s_len, chunk)?;
            let (out, cache) = forward_cached(&params.student, &batch.x.view())?;
            let teacher_out = if cfg.needs_teacher() {
                Some(teacher.batch_outputs(Split::Train, chunk, &batch.x.view())?)
            } else {
                None
            };
            let (bd, out_grads, reg_grads) = engine.eval_with_output_grads(
                &batch,
                &out,
                teacher_out.as_ref(),
                &params.regressor,
            )?;
            if !bd.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let student_grads = backward(
                &params.student,
                &cache,
                &out_grads.gy.view(),
                &out_grads.gh.view(),
            )?;
            let grads = ParamGrads {
                student: student_grads,
                regressor: reg_grads,
            };
            adam_step(&mut params, &grads, &mut adam)?;
            train_bd.scaled_add(&bd, cast::<T>(chunk.len() as f64));
        }
        let inv_n = T::one() / cast::<T>(n_train as f64);
        let train_mean = {
            let mut b = LossBreakdown::<T>::zero();
            b.scaled_add(&train_bd, inv_n);
            b
        };

        // validation pass
        let mut val_bd = LossBreakdown::<T>::zero();
        let mut val_sq = T::zero();
        let mut val_count = T::zero();
        for batch in &val_batches {
            let out = forward(&params.student, &batch.x.view())?;
            let teacher_out = if cfg.needs_teacher() {
                Some(teacher.batch_outputs(Split::Val, &batch.window_indices, &batch.x.view())?)
            } else {
                None
            };
            let bd = engine.eval(batch, &out, teacher_out.as_ref(), &params.regressor)?;
            let weight = cast::<T>(batch.len() as f64);
            val_bd.scaled_add(&bd, weight);
            val_sq += bd.sup * weight;
            val_count += weight;
        }
        let inv_val = T::one() / val_count;
        let val_mean = {
            let mut b = LossBreakdown::<T>::zero();
            b.scaled_add(&val_bd, inv_val);
            b
        };
        let val_mse = val_sq * inv_val;

        let (improved, stop) = stopper.observe(epoch, val_mse);
        if improved {
            best_params = params.clone();
        }
        records.push(EpochRecord {
            train: train_mean,
            val: val_mean,
            val_mse,
            seconds_per_epoch: started.elapsed().as_secs_f64(),
        });
        if stop {
            stopped_early = true;
            break;
        }
    }

    // final test metrics with the best-validation parameters
    let mut test_pred: Option<(Array3<T>, Array3<T>)> = None;
    for batch in data.windows(Split::Test, t_len, s_len, tc.batch_size)? {
        let out = forward(&best_params.student, &batch.x.view())?;
        match &mut test_pred {
            None => test_pred = Some((out.y_hat, batch.y)),
            Some((preds, truths)) => {
                let merged_p = ndarray::concatenate(ndarray::Axis(0), &[preds.view(), out.y_hat.view()])
                    .expect("batch shapes agree");
                let merged_t = ndarray::concatenate(ndarray::Axis(0), &[truths.view(), batch.y.view()])
                    .expect("batch shapes agree");
                *preds = merged_p;
                *truths = merged_t;
            }
        }
    }
    let (preds, truths) = test_pred.expect("test split is nonempty");
    let test_mse = crate::eval::mse(&preds.view(), &truths.view())?;
    let test_mae = crate::eval::mae(&preds.view(), &truths.view())?;

    let report = TrainReport {
        epochs: records,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        test_mse,
        test_mae,
    };
    Ok((best_params.student, best_params.regressor, report))
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of `analytic` against `loss_fn`, sampling at most
/// `max_coords` coordinates per tensor. Returns the maximum relative error
/// `|a−n| / (|a|+|n|+1e-12)`.
pub fn gradient_check<T, F>(
    params: &mut TrainableParams<T>,
    analytic: &ParamGrads<T>,
    mut loss_fn: F,
    h: T,
    max_coords: usize,
    seed: u64,
) -> T
where
    T: Scalar,
    F: FnMut(&TrainableParams<T>) -> T,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensor_sizes: Vec<usize> = analytic.tensors().iter().map(|(_, g)| g.len()).collect();
    let mut max_rel = T::zero();
    let two = cast::<T>(2.0);
    let tiny = cast::<T>(1e-12);
    for (tensor_idx, len) in tensor_sizes.into_iter().enumerate() {
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, max_coords).into_vec()
        };
        for i in coords {
            let original = params.tensors_mut()[tensor_idx].1[i];
            params.tensors_mut()[tensor_idx].1[i] = original + h;
            let up = loss_fn(params);
            params.tensors_mut()[tensor_idx].1[i] = original - h;
            let down = loss_fn(params);
            params.tensors_mut()[tensor_idx].1[i] = original;
            let numeric = (up - down) / (two * h);
            let a = analytic.tensors()[tensor_idx].1[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + tiny);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Gradient check of the full distillation objective on a small synthetic
/// batch. Returns the maximum relative error across all parameter tensors.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_total_loss<T: Scalar>(
    cfg: &DistillConfig<T>,
    batch_size: usize,
    channels: usize,
    d_t: usize,
    h: T,
    max_coords: usize,
    seed: u64,
) -> Result<T> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, s_len, d) = (cfg.t_len, cfg.s_len, cfg.d);
    let x = Array3::from_shape_fn((batch_size, t_len, channels), |_| {
        cast::<T>(rng.random_range(-1.0..1.0))
    });
    let y = Array3::from_shape_fn((batch_size, s_len, channels), |_| {
        cast::<T>(rng.random_range(-1.0..1.0))
    });
    let batch = crate::dataio::WindowBatch {
        x: x.clone(),
        y: y.clone(),
        window_starts: (0..batch_size).collect(),
        window_indices: (0..batch_size).collect(),
    };
    let teacher_out = crate::teacher::oracle_noise_teacher(&y.view(), 0.2, d_t, seed ^ 0x5ca1ab1e)?;

    let student = init_params::<T>(t_len, s_len, d, channels, cfg.norm_mode, 5, seed)?;
    let regressor = Regressor::init(d, d_t, seed.wrapping_add(1));
    let mut params = TrainableParams { student, regressor };

    let engine = LossEngine::new(cfg.clone())?;
    let (out, cache) = forward_cached(&params.student, &batch.x.view())?;
    let (_, out_grads, reg_grads) =
        engine.eval_with_output_grads(&batch, &out, Some(&teacher_out), &params.regressor)?;
    let student_grads = backward(&params.student, &cache, &out_grads.gy.view(), &out_grads.gh.view())?;
    let analytic = ParamGrads {
        student: student_grads,
        regressor: reg_grads,
    };

    let loss_fn = |p: &TrainableParams<T>| -> T {
        let out = forward(&p.student, &batch.x.view()).unwrap();
        engine
            .eval(&batch, &out, Some(&teacher_out), &p.regressor)
            .unwrap()
            .total
    };
    Ok(gradient_check(&mut params, &analytic, loss_fn, h, max_coords, seed))
}

// ---------------------------------------------------------------------------
// theorem verifiers
// ---------------------------------------------------------------------------

/// Margin of the multi-scale mixup bound at one scalar position:
///
/// ```text
/// [(ŷ−y)² + η/(M+1)·Σ_m (ŷ−ŷ_t^m)²] − [ŷ − (λy + (1−λ)·mean_m ŷ_t^m)]²
/// ```
///
/// with `λ = 1/(1+η)`. Jensen's inequality makes this nonnegative.
pub fn theorem1_margin<T: Scalar>(y: T, y_hat: T, teacher_levels: &[T], eta: T) -> T {
    let m1 = cast::<T>(teacher_levels.len() as f64);
    let d = y_hat - y;
    let mut lhs = d * d;
    let mut mean_t = T::zero();
    for &t in teacher_levels {
        let dt = y_hat - t;
        lhs += eta * dt * dt / m1;
        mean_t += t / m1;
    }
    let lambda = T::one() / (T::one() + eta);
    let mixed = lambda * y + (T::one() - lambda) * mean_t;
    let dr = y_hat - mixed;
    lhs - dr * dr
}

/// Elementwise multi-scale bound margin, averaged over positions. Every
/// teacher level must align with `y` (the proof treats values scalar-wise).
pub fn verify_theorem1<T: Scalar>(
    y: &[T],
    y_hat_s: &[T],
    teacher_pyramid: &[Vec<T>],
    eta: T,
) -> Result<T> {
    if eta <= T::zero() {
        return Err(Error::invalid("eta must be positive"));
    }
    if teacher_pyramid.is_empty() {
        return Err(Error::invalid("teacher pyramid must have at least one level"));
    }
    if y.len() != y_hat_s.len() || teacher_pyramid.iter().any(|l| l.len() != y.len()) {
        return Err(Error::shape(
            "verify_theorem1",
            format!("aligned vectors of length {}", y.len()),
            "mismatched lengths".to_string(),
        ));
    }
    let mut acc = T::zero();
    let mut levels = vec![T::zero(); teacher_pyramid.len()];
    for i in 0..y.len() {
        for (m, level) in teacher_pyramid.iter().enumerate() {
            levels[m] = level[i];
        }
        acc += theorem1_margin(y[i], y_hat_s[i], &levels, eta);
    }
    Ok(acc / cast::<T>(y.len() as f64))
}

/// Margin of the multi-period mixup bound in its log-sum form:
///
/// ```text
/// [KL(q_y‖q_s) + η·KL(q_t‖q_s)]
///   − Σ_k (q_y+η·q_t)·ln((q_y+η·q_t)/((1+η)·q_s))
/// ```
///
/// The log-sum inequality makes this nonnegative for strictly positive
/// distributions.
pub fn verify_theorem2<T: Scalar>(q_y: &[T], q_t: &[T], q_s: &[T], eta: T) -> Result<T> {
    if eta <= T::zero() {
        return Err(Error::invalid("eta must be positive"));
    }
    let n = q_y.len();
    if q_t.len() != n || q_s.len() != n || n == 0 {
        return Err(Error::shape(
            "verify_theorem2",
            format!("three distributions of length {n}"),
            "mismatched lengths".to_string(),
        ));
    }
    for dist in [q_y, q_t, q_s] {
        let sum: T = dist.iter().cloned().sum();
        if dist.iter().any(|v| *v <= T::zero()) || (sum - T::one()).abs() > cast::<T>(1e-6) {
            return Err(Error::invalid(
                "inputs must be strictly positive and sum to 1",
            ));
        }
    }
    let one = T::one();
    let mut lhs = T::zero();
    let mut mixture = T::zero();
    for i in 0..n {
        lhs += q_y[i] * (q_y[i] / q_s[i]).ln() + eta * q_t[i] * (q_t[i] / q_s[i]).ln();
        let a = q_y[i] + eta * q_t[i];
        mixture += a * (a / ((one + eta) * q_s[i])).ln();
    }
    Ok(lhs - mixture)
}

/// Minimum theorem-1 margin over `trials` random scalar draws cycling through
/// the given `eta` and `M` grids.
pub fn theorem1_min_margin<T: Scalar>(trials: usize, etas: &[f64], ms: &[usize], seed: u64) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_margin = T::infinity();
    for trial in 0..trials {
        let eta = cast::<T>(etas[trial % etas.len()]);
        let m = ms[(trial / etas.len()) % ms.len()];
        let y = cast::<T>(rng.random_range(-1.0..1.0));
        let y_hat = cast::<T>(rng.random_range(-1.0..1.0));
        let levels: Vec<T> = (0..=m)
            .map(|_| cast::<T>(rng.random_range(-1.0..1.0)))
            .collect();
        let margin = theorem1_margin(y, y_hat, &levels, eta);
        if margin < min_margin {
            min_margin = margin;
        }
    }
    min_margin
}

/// Minimum theorem-2 margin over `trials` random softmax triples cycling
/// through the given `eta` grid and a few distribution widths.
pub fn theorem2_min_margin<T: Scalar>(trials: usize, etas: &[f64], seed: u64) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [2usize, 8, 48];
    let mut min_margin = T::infinity();
    for trial in 0..trials {
        let eta = cast::<T>(etas[trial % etas.len()]);
        let k = dims[(trial / etas.len()) % dims.len()];
        let mut draw = |k: usize| -> Vec<T> {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|v| cast::<T>(v / sum)).collect()
        };
        let q_y = draw(k);
        let q_t = draw(k);
        let q_s = draw(k);
        let margin = verify_theorem2(&q_y, &q_t, &q_s, eta).expect("valid softmax triples");
        if margin < min_margin {
            min_margin = margin;
        }
    }
    min_margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::NormMode;
    use approx::assert_abs_diff_eq;

    fn tiny_params(seed: u64) -> TrainableParams<f64> {
        TrainableParams {
            student: init_params::<f64>(8, 4, 3, 2, NormMode::NonStationary, 3, seed).unwrap(),
            regressor: Regressor::init(3, 2, seed + 1),
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut params = tiny_params(0);
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = AdamState::new(&mut params, 0.01);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(params.student.w1_seasonal, before.student.w1_seasonal);
        assert_eq!(params.student.w2, before.student.w2);
        assert_eq!(params.regressor.w, before.regressor.w);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = tiny_params(1);
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.student.w2[(0, 0)] = 3.7;
        grads.student.w2[(1, 1)] = -0.5;
        let mut state = AdamState::new(&mut params, 0.01);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let d00 = params.student.w2[(0, 0)] - before.student.w2[(0, 0)];
        let d11 = params.student.w2[(1, 1)] - before.student.w2[(1, 1)];
        assert_abs_diff_eq!(d00, -0.01, epsilon = 1e-6);
        assert_abs_diff_eq!(d11, 0.01, epsilon = 1e-6);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = tiny_params(2);
            let mut grads = ParamGrads::zeros_like(&params);
            grads.student.w1_seasonal.fill(0.25);
            grads.regressor.w.fill(-0.1);
            let mut state = AdamState::new(&mut params, 0.01);
            for _ in 0..5 {
                adam_step(&mut params, &grads, &mut state).unwrap();
            }
            params.student.w1_seasonal.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = tiny_params(3);
        let mut grads = ParamGrads::zeros_like(&params);
        grads.student.b2[0] = f64::NAN;
        let mut state = AdamState::new(&mut params, 0.01);
        let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
        match err {
            Error::NonFiniteGradient { tensor } => assert_eq!(tensor, "b2"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn patience_arithmetic() {
        // best at epoch 2, monotone increase afterwards, patience 5 -> stop at 7
        let mut stopper = EarlyStopper::<f64>::new(5);
        let vals = [0.9, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7];
        let mut stopped_at = None;
        for (epoch, v) in vals.iter().enumerate() {
            let epoch = epoch + 1; // 1-based
            let (_, stop) = stopper.observe(epoch, *v);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(stopper.best_epoch(), 2);
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let mut params = tiny_params(4);
        // loss = Σ p² over every tensor; gradient = 2p
        let mut analytic = ParamGrads::zeros_like(&params);
        analytic.student.w1_seasonal = &params.student.w1_seasonal * 2.0;
        analytic.student.b1_seasonal = &params.student.b1_seasonal * 2.0;
        analytic.student.w1_trend = &params.student.w1_trend * 2.0;
        analytic.student.b1_trend = &params.student.b1_trend * 2.0;
        analytic.student.w2 = &params.student.w2 * 2.0;
        analytic.student.b2 = &params.student.b2 * 2.0;
        analytic.regressor.w = &params.regressor.w * 2.0;
        analytic.regressor.b = &params.regressor.b * 2.0;
        let loss = |p: &TrainableParams<f64>| -> f64 {
            let mut acc = 0.0;
            acc += p.student.w1_seasonal.iter().map(|v| v * v).sum::<f64>();
            acc += p.student.b1_seasonal.iter().map(|v| v * v).sum::<f64>();
            acc += p.student.w1_trend.iter().map(|v| v * v).sum::<f64>();
            acc += p.student.b1_trend.iter().map(|v| v * v).sum::<f64>();
            acc += p.student.w2.iter().map(|v| v * v).sum::<f64>();
            acc += p.student.b2.iter().map(|v| v * v).sum::<f64>();
            acc += p.regressor.w.iter().map(|v| v * v).sum::<f64>();
            acc += p.regressor.b.iter().map(|v| v * v).sum::<f64>();
            acc
        };
        let err = gradient_check(&mut params, &analytic, loss, 1e-5, 200, 9);
        assert!(err < 1e-7, "max rel error {err}");
    }

    #[test]
    fn full_objective_gradient_check() {
        let mut cfg = DistillConfig::<f64>::new(16, 8, 8);
        cfg.m = 2;
        cfg.alpha = 1.0;
        cfg.beta = 1.0;
        let err = gradient_check_total_loss(&cfg, 2, 2, 6, 1e-5, 200, 7).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut cfg = DistillConfig::<f64>::new(16, 8, 8);
        cfg.m = 2;
        // recompute the analytic gradient, then double one tensor
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array3::from_shape_fn((2, 16, 2), |_| rng.random_range(-1.0f64..1.0));
        let y = Array3::from_shape_fn((2, 8, 2), |_| rng.random_range(-1.0f64..1.0));
        let batch = crate::dataio::WindowBatch {
            x,
            y: y.clone(),
            window_starts: vec![0, 1],
            window_indices: vec![0, 1],
        };
        let teacher_out = crate::teacher::oracle_noise_teacher(&y.view(), 0.2, 6, 3).unwrap();
        let student = init_params::<f64>(16, 8, 8, 2, cfg.norm_mode, 5, 7).unwrap();
        let regressor = Regressor::init(8, 6, 8);
        let mut params = TrainableParams { student, regressor };
        let engine = LossEngine::new(cfg).unwrap();
        let (out, cache) = forward_cached(&params.student, &batch.x.view()).unwrap();
        let (_, og, rg) = engine
            .eval_with_output_grads(&batch, &out, Some(&teacher_out), &params.regressor)
            .unwrap();
        let sg = backward(&params.student, &cache, &og.gy.view(), &og.gh.view()).unwrap();
        let mut analytic = ParamGrads {
            student: sg,
            regressor: rg,
        };
        analytic.student.w2 *= 2.0;
        let loss_fn = |p: &TrainableParams<f64>| -> f64 {
            let out = forward(&p.student, &batch.x.view()).unwrap();
            engine
                .eval(&batch, &out, Some(&teacher_out), &p.regressor)
                .unwrap()
                .total
        };
        let err = gradient_check(&mut params, &analytic, loss_fn, 1e-5, 50, 11);
        assert!(err > 0.3, "corruption rel error only {err}");
    }

    #[test]
    fn theorem1_jensen_equality_case() {
        // teacher levels all equal to y: margin = η·(ŷ−y)²
        let (y, y_hat, eta) = (0.3, -0.6, 0.7);
        let levels = vec![y; 4];
        let margin = theorem1_margin(y, y_hat, &levels, eta);
        assert_abs_diff_eq!(margin, eta * (y_hat - y) * (y_hat - y), epsilon = 1e-12);
    }

    #[test]
    fn theorem1_mixed_target_case() {
        // student equals the mixed target: right side 0, margin = left side >= 0
        let y = 0.4;
        let levels = vec![0.9, -0.2];
        let eta = 1.3;
        let lambda = 1.0 / (1.0 + eta);
        let mean_t: f64 = levels.iter().sum::<f64>() / levels.len() as f64;
        let y_hat = lambda * y + (1.0 - lambda) * mean_t;
        let margin = theorem1_margin(y, y_hat, &levels, eta);
        let lhs = (y_hat - y).powi(2)
            + eta * levels.iter().map(|t| (y_hat - t).powi(2)).sum::<f64>() / levels.len() as f64;
        assert_abs_diff_eq!(margin, lhs, epsilon = 1e-12);
        assert!(margin >= 0.0);
    }

    #[test]
    fn theorem1_randomized_suite() {
        let min = theorem1_min_margin::<f64>(10_000, &[0.1, 1.0, 10.0], &[0, 1, 3], 42);
        assert!(min >= -1e-9, "min margin {min}");
    }

    #[test]
    fn theorem2_identity_case() {
        let q = vec![0.25, 0.25, 0.25, 0.25];
        let margin = verify_theorem2(&q, &q, &q, 1.0).unwrap();
        assert_abs_diff_eq!(margin, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn theorem2_randomized_suite() {
        let min = theorem2_min_margin::<f64>(10_000, &[0.5, 1.0, 2.0], 43);
        assert!(min >= -1e-9, "min margin {min}");
    }

    #[test]
    fn theorem2_strict_when_ratios_differ() {
        let q_t = vec![0.97, 0.01, 0.01, 0.01];
        let q_s = vec![0.25; 4];
        let q_y = vec![0.25; 4];
        let margin = verify_theorem2(&q_y, &q_t, &q_s, 1.0).unwrap();
        assert!(margin > 1e-6, "margin {margin}");
    }

    #[test]
    fn theorem2_rejects_non_distributions() {
        let q = vec![0.5, 0.5];
        assert!(verify_theorem2(&q, &q, &[0.9, 0.2], 1.0).is_err());
        assert!(verify_theorem2(&q, &[0.5, -0.5], &q, 1.0).is_err());
        assert!(verify_theorem2(&q, &q, &q, 0.0).is_err());
    }
}
