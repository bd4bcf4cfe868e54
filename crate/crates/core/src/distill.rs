//! The combined distillation objective.
//!
//! The total training loss is
//!
//! ```text
//! L = L_sup + α·(L_scale^Y + L_period^Y) + β·(L_scale^H + L_period^H)
//! ```
//!
//! with the supervised term on de-normalized predictions, prediction-level
//! distillation on de-normalized predictions of both models, and
//! feature-level distillation on normalized internal features (the teacher
//! side first pushed through the regressor). Ablation flags zero individual
//! terms; an optional ground-truth-pattern term replaces plain supervision
//! with multi-scale plus multi-period matching against the ground truth.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, s};
use serde::{Deserialize, Serialize};

use crate::dataio::WindowBatch;
use crate::error::{Error, Result};
use crate::multiscale::{build_pyramid, scale_loss_grad};
use crate::spectral::{
    grad_through_distribution, kl_div, period_distribution, period_target_grad_with,
    spectrum_cache, DftPlan, PeriodDistribution,
};
use crate::student::{NormMode, StudentOutput};
use crate::teacher::{Regressor, RegressorGrads, TeacherOutputs};
use crate::{cast, Scalar};

/// Weights, temperature, scale count, and ablation switches of the objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig<T> {
    /// Weight of prediction-level distillation.
    pub alpha: T,
    /// Weight of feature-level distillation.
    pub beta: T,
    /// Softmax temperature for period distributions.
    pub tau: T,
    /// Number of downsampling steps (the pyramid has M+1 levels).
    pub m: usize,
    pub use_scale: bool,
    pub use_period: bool,
    pub use_pred_level: bool,
    pub use_feat_level: bool,
    pub use_sup: bool,
    pub use_gt_pattern: bool,
    /// Freeze the regressor instead of training it jointly.
    pub regressor_stop_grad: bool,
    pub norm_mode: NormMode,
    pub d: usize,
    pub t_len: usize,
    pub s_len: usize,
}

impl<T: Scalar> DistillConfig<T> {
    /// Defaults: α=0.1, β=0.5, τ=0.5, M=3, every loss path enabled.
    pub fn new(t_len: usize, s_len: usize, d: usize) -> Self {
        DistillConfig {
            alpha: cast::<T>(0.1),
            beta: cast::<T>(0.5),
            tau: cast::<T>(0.5),
            m: 3,
            use_scale: true,
            use_period: true,
            use_pred_level: true,
            use_feat_level: true,
            use_sup: true,
            use_gt_pattern: false,
            regressor_stop_grad: false,
            norm_mode: NormMode::NonStationary,
            d,
            t_len,
            s_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < T::zero() || self.beta < T::zero() {
            return Err(Error::invalid("alpha and beta must be nonnegative"));
        }
        if self.tau <= T::zero() {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.d == 0 || self.t_len == 0 || self.s_len == 0 {
            return Err(Error::invalid("T, S, and D must be positive"));
        }
        if self.s_len >> self.m == 0 {
            return Err(Error::invalid(format!(
                "M={} is too deep for horizon S={}",
                self.m, self.s_len
            )));
        }
        if self.d >> self.m == 0 {
            return Err(Error::invalid(format!(
                "M={} is too deep for feature dim D={}",
                self.m, self.d
            )));
        }
        Ok(())
    }

    fn pred_kd_active(&self) -> bool {
        self.use_pred_level && self.alpha > T::zero() && (self.use_scale || self.use_period)
    }

    fn feat_kd_active(&self) -> bool {
        self.use_feat_level && self.beta > T::zero() && (self.use_scale || self.use_period)
    }

    /// Whether any loss term queries the teacher.
    pub fn needs_teacher(&self) -> bool {
        self.pred_kd_active() || self.feat_kd_active()
    }
}

/// Scalar values of every loss term plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub sup: T,
    pub scale_y: T,
    pub scale_h: T,
    pub period_y: T,
    pub period_h: T,
    pub gt_pattern: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn zero() -> Self {
        LossBreakdown {
            sup: T::zero(),
            scale_y: T::zero(),
            scale_h: T::zero(),
            period_y: T::zero(),
            period_h: T::zero(),
            gt_pattern: T::zero(),
            total: T::zero(),
        }
    }

    fn finish(mut self, cfg: &DistillConfig<T>) -> Self {
        let mut total = T::zero();
        if cfg.use_sup {
            total += self.sup;
        }
        total += cfg.alpha * (self.scale_y + self.period_y);
        total += cfg.beta * (self.scale_h + self.period_h);
        if cfg.use_gt_pattern {
            total += self.gt_pattern;
        }
        self.total = total;
        self
    }

    /// Weighted-average accumulation across batches of different sizes.
    pub fn scaled_add(&mut self, other: &LossBreakdown<T>, weight: T) {
        self.sup += other.sup * weight;
        self.scale_y += other.scale_y * weight;
        self.scale_h += other.scale_h * weight;
        self.period_y += other.period_y * weight;
        self.period_h += other.period_h * weight;
        self.gt_pattern += other.gt_pattern * weight;
        self.total += other.total * weight;
    }

    pub fn is_finite(&self) -> bool {
        self.sup.is_finite()
            && self.scale_y.is_finite()
            && self.scale_h.is_finite()
            && self.period_y.is_finite()
            && self.period_h.is_finite()
            && self.gt_pattern.is_finite()
            && self.total.is_finite()
    }
}

/// Supervised loss: mean squared error over `B·S·C`.
pub fn sup_loss<T: Scalar>(y_hat_s: &ArrayView3<T>, y: &ArrayView3<T>) -> Result<T> {
    crate::eval::mse(y_hat_s, y)
}

/// Adjoints of the loss with respect to the student outputs.
pub struct OutputGrads<T> {
    /// dL/dŷ, `[B × S × C]`.
    pub gy: Array3<T>,
    /// dL/dh, `[B × D × C]`.
    pub gh: Array3<T>,
}

type EvalParts<T> = (LossBreakdown<T>, Option<OutputGrads<T>>, RegressorGrads<T>);

/// Objective evaluator with cached DFT plans for the two signal lengths.
pub struct LossEngine<T> {
    pub cfg: DistillConfig<T>,
    plan_pred: DftPlan<T>,
    plan_feat: DftPlan<T>,
}

impl<T: Scalar> LossEngine<T> {
    pub fn new(cfg: DistillConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let plan_pred = DftPlan::new(cfg.s_len);
        let plan_feat = DftPlan::new(cfg.d);
        Ok(LossEngine {
            cfg,
            plan_pred,
            plan_feat,
        })
    }

    /// Loss values only.
    pub fn eval(
        &self,
        batch: &WindowBatch<T>,
        student_out: &StudentOutput<T>,
        teacher_out: Option<&TeacherOutputs<T>>,
        regressor: &Regressor<T>,
    ) -> Result<LossBreakdown<T>> {
        let (bd, _, _) = self.eval_inner(batch, student_out, teacher_out, regressor, false)?;
        Ok(bd)
    }

    /// Loss values plus adjoints with respect to the student outputs and the
    /// regressor parameters.
    pub fn eval_with_output_grads(
        &self,
        batch: &WindowBatch<T>,
        student_out: &StudentOutput<T>,
        teacher_out: Option<&TeacherOutputs<T>>,
        regressor: &Regressor<T>,
    ) -> Result<(LossBreakdown<T>, OutputGrads<T>, RegressorGrads<T>)> {
        let (bd, grads, reg_grads) =
            self.eval_inner(batch, student_out, teacher_out, regressor, true)?;
        Ok((bd, grads.expect("grads requested"), reg_grads))
    }

    fn eval_inner(
        &self,
        batch: &WindowBatch<T>,
        student_out: &StudentOutput<T>,
        teacher_out: Option<&TeacherOutputs<T>>,
        regressor: &Regressor<T>,
        want_grads: bool,
    ) -> Result<EvalParts<T>> {
        let cfg = &self.cfg;
        let (b, s_len, c) = student_out.y_hat.dim();
        let d = student_out.h.dim().1;
        if batch.y.dim() != (b, s_len, c) {
            return Err(Error::shape(
                "total_loss",
                format!("{:?}", student_out.y_hat.dim()),
                format!("{:?}", batch.y.dim()),
            ));
        }
        let inv_b = T::one() / cast::<T>(b as f64);
        let mut bd = LossBreakdown::zero();
        let mut gy = Array3::zeros((b, s_len, c));
        let mut gh = Array3::zeros((b, d, c));
        let mut reg_grads = RegressorGrads::zeros_like(regressor);

        // supervised term (value always reported; total gates on use_sup)
        bd.sup = sup_loss(&student_out.y_hat.view(), &batch.y.view())?;
        if want_grads && cfg.use_sup {
            let scale = cast::<T>(2.0) / cast::<T>(batch.y.len() as f64);
            for (g, (a, t)) in gy
                .iter_mut()
                .zip(student_out.y_hat.iter().zip(batch.y.iter()))
            {
                *g += (*a - *t) * scale;
            }
        }

        if cfg.needs_teacher() {
            let teacher = teacher_out.ok_or_else(|| {
                Error::TeacherAlignment("distillation terms enabled but no teacher outputs supplied".into())
            })?;
            if teacher.y_hat.dim() != (b, s_len, c) {
                return Err(Error::TeacherAlignment(format!(
                    "teacher predictions {:?} do not match batch {:?}",
                    teacher.y_hat.dim(),
                    (b, s_len, c)
                )));
            }

            if cfg.pred_kd_active() {
                for bi in 0..b {
                    let ys = student_out.y_hat.slice(s![bi, .., ..]);
                    let yt = teacher.y_hat.slice(s![bi, .., ..]);
                    if cfg.use_scale {
                        let pt = build_pyramid(&yt, cfg.m)?;
                        let ps = build_pyramid(&ys, cfg.m)?;
                        let (loss, grad) = scale_loss_grad(&pt, &ps)?;
                        bd.scale_y += loss * inv_b;
                        if want_grads {
                            let w = cfg.alpha * inv_b;
                            gy.slice_mut(s![bi, .., ..]).scaled_add(w, &grad);
                        }
                    }
                    if cfg.use_period {
                        let q_t =
                            period_distribution(&spectrum_cache(&self.plan_pred, &yt)?.sp, cfg.tau)?;
                        let (loss, grad) =
                            self.period_student_side(&self.plan_pred, &ys, &q_t, want_grads)?;
                        bd.period_y += loss * inv_b;
                        if want_grads {
                            let w = cfg.alpha * inv_b;
                            gy.slice_mut(s![bi, .., ..]).scaled_add(w, &grad.unwrap());
                        }
                    }
                }
            }

            if cfg.feat_kd_active() {
                let h_regressed = regressor.apply(&teacher.h.view())?;
                let train_regressor = want_grads && !cfg.regressor_stop_grad;
                for bi in 0..b {
                    let hs = student_out.h.slice(s![bi, .., ..]);
                    let ht = h_regressed.slice(s![bi, .., ..]);
                    // adjoint wrt the regressed teacher features for this sample
                    let mut g_ht: Option<Array2<T>> = None;
                    if cfg.use_scale {
                        let pt = build_pyramid(&ht, cfg.m)?;
                        let ps = build_pyramid(&hs, cfg.m)?;
                        let (loss, grad) = scale_loss_grad(&pt, &ps)?;
                        bd.scale_h += loss * inv_b;
                        if want_grads {
                            let w = cfg.beta * inv_b;
                            gh.slice_mut(s![bi, .., ..]).scaled_add(w, &grad);
                            if train_regressor {
                                // teacher-side gradient is the negation
                                g_ht = Some(grad * (-w));
                            }
                        }
                    }
                    if cfg.use_period {
                        let q_t =
                            period_distribution(&spectrum_cache(&self.plan_feat, &ht)?.sp, cfg.tau)?;
                        let (loss, grad) =
                            self.period_student_side(&self.plan_feat, &hs, &q_t, want_grads)?;
                        bd.period_h += loss * inv_b;
                        if want_grads {
                            let w = cfg.beta * inv_b;
                            gh.slice_mut(s![bi, .., ..]).scaled_add(w, &grad.unwrap());
                            if train_regressor {
                                let q_s = period_distribution(
                                    &spectrum_cache(&self.plan_feat, &hs)?.sp,
                                    cfg.tau,
                                )?;
                                let (_, g_target) = period_target_grad_with(
                                    &self.plan_feat,
                                    &ht,
                                    &q_s,
                                    cfg.tau,
                                )?;
                                match &mut g_ht {
                                    Some(acc) => *acc = &*acc + &(g_target * w),
                                    None => g_ht = Some(g_target * w),
                                }
                            }
                        }
                    }
                    if let Some(g) = g_ht {
                        // chain through the per-channel affine regressor
                        let g3 = g.insert_axis(ndarray::Axis(0));
                        let ht_raw = teacher.h.slice(s![bi..bi + 1, .., ..]);
                        reg_grads.accumulate(&g3.view(), &ht_raw);
                    }
                }
            }
        }

        if cfg.use_gt_pattern {
            for bi in 0..b {
                let ys = student_out.y_hat.slice(s![bi, .., ..]);
                let yt = batch.y.slice(s![bi, .., ..]);
                let (loss, grad) = self.gt_pattern_sample(&ys, &yt, want_grads)?;
                bd.gt_pattern += loss * inv_b;
                if want_grads {
                    gy.slice_mut(s![bi, .., ..]).scaled_add(inv_b, &grad.unwrap());
                }
            }
        }

        let bd = bd.finish(cfg);
        let grads = want_grads.then_some(OutputGrads { gy, gh });
        Ok((bd, grads, reg_grads))
    }

    /// KL(q_t, Q(signal)) and optionally its gradient wrt the signal.
    fn period_student_side(
        &self,
        plan: &DftPlan<T>,
        signal: &ArrayView2<T>,
        q_t: &PeriodDistribution<T>,
        want_grad: bool,
    ) -> Result<(T, Option<Array2<T>>)> {
        let cache = spectrum_cache(plan, signal)?;
        let q_s = period_distribution(&cache.sp, self.cfg.tau)?;
        let loss = kl_div(q_t, &q_s)?;
        if !want_grad {
            return Ok((loss, None));
        }
        let eps = cast::<T>(1e-12);
        let inv_c = T::one() / cast::<T>(q_s.q.ncols() as f64);
        let mut dq = Array2::zeros(q_s.q.dim());
        for ((idx, p), s_val) in q_t.q.indexed_iter().zip(q_s.q.iter()) {
            dq[idx] = -*p / s_val.max(eps) * inv_c;
        }
        let grad = grad_through_distribution(plan, &cache, &q_s, &dq);
        Ok((loss, Some(grad)))
    }

    /// Ground-truth-pattern loss for one sample: multi-scale MSE against the
    /// truth pyramid plus period KL with the truth as target.
    fn gt_pattern_sample(
        &self,
        y_hat: &ArrayView2<T>,
        y: &ArrayView2<T>,
        want_grad: bool,
    ) -> Result<(T, Option<Array2<T>>)> {
        let cfg = &self.cfg;
        let pt = build_pyramid(y, cfg.m)?;
        let ps = build_pyramid(y_hat, cfg.m)?;
        let (scale_part, scale_grad) = scale_loss_grad(&pt, &ps)?;
        let q_y = period_distribution(&spectrum_cache(&self.plan_pred, y)?.sp, cfg.tau)?;
        let (period_part, period_grad) =
            self.period_student_side(&self.plan_pred, y_hat, &q_y, want_grad)?;
        let loss = scale_part + period_part;
        if !want_grad {
            return Ok((loss, None));
        }
        let grad = scale_grad + period_grad.unwrap();
        Ok((loss, Some(grad)))
    }
}

/// One-shot evaluation of the full objective (constructs plans internally).
pub fn total_loss<T: Scalar>(
    batch: &WindowBatch<T>,
    student_out: &StudentOutput<T>,
    teacher_out: Option<&TeacherOutputs<T>>,
    regressor: &Regressor<T>,
    cfg: &DistillConfig<T>,
) -> Result<LossBreakdown<T>> {
    LossEngine::new(cfg.clone())?.eval(batch, student_out, teacher_out, regressor)
}

/// Multi-scale plus multi-period matching against the ground truth (the
/// optional replacement for plain supervision), averaged over the batch.
pub fn gt_pattern_loss<T: Scalar>(
    y_hat_s: &ArrayView3<T>,
    y: &ArrayView3<T>,
    cfg: &DistillConfig<T>,
) -> Result<T> {
    if y_hat_s.dim() != y.dim() {
        return Err(Error::shape(
            "gt_pattern_loss",
            format!("{:?}", y.dim()),
            format!("{:?}", y_hat_s.dim()),
        ));
    }
    let engine = LossEngine::new(cfg.clone())?;
    let b = y.dim().0;
    let mut acc = T::zero();
    for bi in 0..b {
        let (loss, _) = engine.gt_pattern_sample(
            &y_hat_s.slice(s![bi, .., ..]),
            &y.slice(s![bi, .., ..]),
            false,
        )?;
        acc += loss;
    }
    Ok(acc / cast::<T>(b as f64))
}
