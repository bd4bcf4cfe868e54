//! Discrete Fourier analysis of predictions and features.
//!
//! The period-matching loss needs amplitude spectra of signals whose lengths
//! (96, 192, 336, 720, arbitrary feature widths) are usually not powers of
//! two. [`DftPlan`] therefore evaluates the unnormalized forward DFT
//!
//! ```text
//! X_k = sum_n x_n · exp(-2πi·kn/L)
//! ```
//!
//! with the Bluestein chirp-z algorithm over a power-of-two radix-2 core,
//! falling back to the plain radix-2 transform when `L` already is a power of
//! two. The public surface built on top:
//!
//! - [`dft_amplitude`]: amplitude spectrogram, DC removed, bins `1..=L/2`,
//! - [`period_distribution`]: temperature softmax over the amplitude bins,
//! - [`kl_div`]: KL divergence between two period distributions,
//! - [`period_loss_grad`]: analytic gradient of the KL period loss through
//!   softmax, amplitude, and the DFT back to the time-domain signal.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Floor used inside logarithms and amplitude divisions.
const EPS_LOG: f64 = 1e-12;

// ---------------------------------------------------------------------------
// radix-2 core
// ---------------------------------------------------------------------------

/// Iterative radix-2 Cooley-Tukey transform for power-of-two lengths.
struct Radix2<T> {
    len: usize,
    // twiddles[j] = exp(-2πi·j/len) for j in 0..len/2
    twiddles: Vec<Complex<T>>,
}

impl<T: Scalar> Radix2<T> {
    fn new(len: usize) -> Self {
        assert!(len.is_power_of_two());
        let twiddles = (0..len / 2)
            .map(|j| {
                let angle = -2.0 * std::f64::consts::PI * j as f64 / len as f64;
                Complex::new(cast::<T>(angle.cos()), cast::<T>(angle.sin()))
            })
            .collect();
        Radix2 { len, twiddles }
    }

    /// In-place forward transform.
    fn forward(&self, data: &mut [Complex<T>]) {
        let n = self.len;
        debug_assert_eq!(data.len(), n);
        if n <= 1 {
            return;
        }
        // bit-reversal permutation
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
        let mut width = 2;
        while width <= n {
            let half = width / 2;
            let stride = n / width;
            for start in (0..n).step_by(width) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            width *= 2;
        }
    }

    /// In-place unnormalized inverse transform (conjugation trick).
    fn inverse_unnormalized(&self, data: &mut [Complex<T>]) {
        for z in data.iter_mut() {
            *z = z.conj();
        }
        self.forward(data);
        for z in data.iter_mut() {
            *z = z.conj();
        }
    }
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

enum PlanKind<T> {
    /// Input length is itself a power of two.
    Direct(Radix2<T>),
    /// Bluestein chirp-z: DFT of arbitrary length as a circular convolution
    /// carried out on a power-of-two core of size `core.len >= 2L-1`.
    Bluestein {
        core: Radix2<T>,
        /// chirp[n] = exp(-iπ·n²/L) for n in 0..L
        chirp: Vec<Complex<T>>,
        /// forward core transform of the wrapped conjugate-chirp kernel
        kernel_fft: Vec<Complex<T>>,
    },
}

/// Precomputed plan for unnormalized forward DFTs of one fixed length.
pub struct DftPlan<T> {
    len: usize,
    kind: PlanKind<T>,
}

impl<T: Scalar> DftPlan<T> {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "transform length must be positive");
        let kind = if len.is_power_of_two() {
            PlanKind::Direct(Radix2::new(len))
        } else {
            let core_len = (2 * len - 1).next_power_of_two();
            let core = Radix2::new(core_len);
            // exponent period of exp(-iπ m/L) in m is 2L
            let modulus = 2 * len;
            let chirp: Vec<Complex<T>> = (0..len)
                .map(|n| {
                    let m = (n * n) % modulus;
                    let angle = -std::f64::consts::PI * m as f64 / len as f64;
                    Complex::new(cast::<T>(angle.cos()), cast::<T>(angle.sin()))
                })
                .collect();
            let mut kernel = vec![Complex::new(T::zero(), T::zero()); core_len];
            for n in 0..len {
                let b = chirp[n].conj();
                kernel[n] = b;
                if n > 0 {
                    kernel[core_len - n] = b;
                }
            }
            core.forward(&mut kernel);
            PlanKind::Bluestein {
                core,
                chirp,
                kernel_fft: kernel,
            }
        };
        DftPlan { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized forward DFT of a complex signal of length `self.len()`.
    pub fn forward(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(x.len(), self.len, "signal length must match the plan");
        match &self.kind {
            PlanKind::Direct(core) => {
                let mut data = x.to_vec();
                core.forward(&mut data);
                data
            }
            PlanKind::Bluestein {
                core,
                chirp,
                kernel_fft,
            } => {
                let p = core.len;
                let mut a = vec![Complex::new(T::zero(), T::zero()); p];
                for n in 0..self.len {
                    a[n] = x[n] * chirp[n];
                }
                core.forward(&mut a);
                for (av, kv) in a.iter_mut().zip(kernel_fft.iter()) {
                    *av *= *kv;
                }
                core.inverse_unnormalized(&mut a);
                let scale = T::one() / cast::<T>(p as f64);
                (0..self.len).map(|k| a[k] * scale * chirp[k]).collect()
            }
        }
    }

    /// Forward DFT of a real signal.
    pub fn forward_real(&self, x: &[T]) -> Vec<Complex<T>> {
        let buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward(&buf)
    }
}

// ---------------------------------------------------------------------------
// spectrogram and period distribution
// ---------------------------------------------------------------------------

/// Amplitude spectrogram with the DC component removed.
///
/// `amp` has shape `[L/2 × C]`; row `k-1` holds the amplitude of bin `k`,
/// which corresponds to a period of `ceil(L/k)` time steps.
#[derive(Debug, Clone)]
pub struct Spectrogram<T> {
    pub amp: Array2<T>,
    pub source_length: usize,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn num_bins(&self) -> usize {
        self.amp.nrows()
    }

    pub fn num_channels(&self) -> usize {
        self.amp.ncols()
    }

    /// Period length (in time steps) associated with 1-based bin `k`.
    pub fn period_of_bin(&self, k: usize) -> usize {
        self.source_length.div_ceil(k)
    }
}

/// Temperature-softmax distribution over amplitude bins, per channel.
#[derive(Debug, Clone)]
pub struct PeriodDistribution<T> {
    pub q: Array2<T>,
    pub temperature: T,
}

/// Per-channel complex spectra kept around for the backward pass.
pub struct SpectrumCache<T> {
    /// Full-length spectrum per channel.
    pub spectra: Vec<Vec<Complex<T>>>,
    pub sp: Spectrogram<T>,
}

/// Amplitude spectrogram of `x` (`[L × C]`), bins `1..=L/2`, via [`DftPlan`].
pub fn dft_amplitude<T: Scalar>(x: &ArrayView2<T>) -> Result<Spectrogram<T>> {
    let plan = DftPlan::new(x.nrows().max(1));
    Ok(spectrum_cache(&plan, x)?.sp)
}

/// Forward spectra plus amplitudes, reusing a prebuilt plan.
pub fn spectrum_cache<T: Scalar>(plan: &DftPlan<T>, x: &ArrayView2<T>) -> Result<SpectrumCache<T>> {
    let l = x.nrows();
    if l < 2 {
        return Err(Error::invalid(format!(
            "dft_amplitude requires a signal of length >= 2, got {l}"
        )));
    }
    if plan.len() != l {
        return Err(Error::shape(
            "spectrum_cache",
            format!("signal length {}", plan.len()),
            format!("{l}"),
        ));
    }
    let c = x.ncols();
    let k_bins = l / 2;
    let mut amp = Array2::zeros((k_bins, c));
    let mut spectra = Vec::with_capacity(c);
    let mut buf: Vec<T> = vec![T::zero(); l];
    for ch in 0..c {
        for (t, v) in x.column(ch).iter().enumerate() {
            buf[t] = *v;
        }
        let spec = plan.forward_real(&buf);
        for k in 1..=k_bins {
            amp[(k - 1, ch)] = spec[k].norm();
        }
        spectra.push(spec);
    }
    Ok(SpectrumCache {
        spectra,
        sp: Spectrogram {
            amp,
            source_length: l,
        },
    })
}

/// Softmax with temperature `tau` over each channel's amplitude bins.
pub fn period_distribution<T: Scalar>(sp: &Spectrogram<T>, tau: T) -> Result<PeriodDistribution<T>> {
    if tau <= T::zero() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (k_bins, c) = (sp.num_bins(), sp.num_channels());
    let mut q = Array2::zeros((k_bins, c));
    for ch in 0..c {
        let col = sp.amp.column(ch);
        let max = col.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for k in 0..k_bins {
            let e = ((col[k] - max) / tau).exp();
            q[(k, ch)] = e;
            sum += e;
        }
        for k in 0..k_bins {
            q[(k, ch)] /= sum;
        }
    }
    Ok(PeriodDistribution { q, temperature: tau })
}

/// KL divergence `KL(q_t || q_s)`: sum over bins, mean over channels.
///
/// The student side is floored at `1e-12` inside the logarithm; note the
/// divergence is asymmetric in its arguments.
pub fn kl_div<T: Scalar>(q_t: &PeriodDistribution<T>, q_s: &PeriodDistribution<T>) -> Result<T> {
    if q_t.q.dim() != q_s.q.dim() {
        return Err(Error::shape(
            "kl_div",
            format!("{:?}", q_t.q.dim()),
            format!("{:?}", q_s.q.dim()),
        ));
    }
    let eps = cast::<T>(EPS_LOG);
    let c = q_t.q.ncols();
    let mut total = T::zero();
    for ch in 0..c {
        let mut acc = T::zero();
        for (p, s) in q_t.q.column(ch).iter().zip(q_s.q.column(ch).iter()) {
            acc += *p * (p.max(eps).ln() - s.max(eps).ln());
        }
        total += acc;
    }
    Ok(total / cast::<T>(c as f64))
}

/// dLoss/dq for the student-side argument of `kl_div(q_t, Q(y_s))`.
fn kl_student_side_dq<T: Scalar>(q_t: &Array2<T>, q_s: &Array2<T>) -> Array2<T> {
    let eps = cast::<T>(EPS_LOG);
    let inv_c = T::one() / cast::<T>(q_t.ncols() as f64);
    let mut dq = Array2::zeros(q_t.dim());
    for ((idx, p), s) in q_t.indexed_iter().zip(q_s.iter()) {
        dq[idx] = -*p / s.max(eps) * inv_c;
    }
    dq
}

/// dLoss/dq for the target-side argument of `kl_div(Q(y_t), q_s)`.
fn kl_target_side_dq<T: Scalar>(q_t: &Array2<T>, q_s: &Array2<T>) -> Array2<T> {
    let eps = cast::<T>(EPS_LOG);
    let inv_c = T::one() / cast::<T>(q_t.ncols() as f64);
    let mut dq = Array2::zeros(q_t.dim());
    for ((idx, p), s) in q_t.indexed_iter().zip(q_s.iter()) {
        dq[idx] = (p.max(eps).ln() - s.max(eps).ln() + T::one()) * inv_c;
    }
    dq
}

/// Pull a gradient on the period distribution back to the time-domain signal.
///
/// Chains the softmax adjoint, the amplitude adjoint
/// `d|z|/d(re,im) = (re,im)/|z|` (defined as 0 where `|z| < 1e-12`), and the
/// real-signal adjoint of the DFT.
pub fn grad_through_distribution<T: Scalar>(
    plan: &DftPlan<T>,
    cache: &SpectrumCache<T>,
    q: &PeriodDistribution<T>,
    dq: &Array2<T>,
) -> Array2<T> {
    let l = cache.sp.source_length;
    let k_bins = cache.sp.num_bins();
    let c = cache.sp.num_channels();
    let tau = q.temperature;
    let eps = cast::<T>(EPS_LOG);
    let mut grad = Array2::zeros((l, c));
    let zero = Complex::new(T::zero(), T::zero());
    for ch in 0..c {
        // softmax adjoint: da_j = q_j · (g_j - Σ_k g_k q_k) / τ
        let qc = q.q.column(ch);
        let gc = dq.column(ch);
        let dot: T = qc.iter().zip(gc.iter()).map(|(a, b)| *a * *b).sum();
        // amplitude + DFT adjoint: g_y[n] = Σ_k Re(conj(gX_k)·e^{-2πikn/L})
        let mut g_spec = vec![zero; l];
        for k in 1..=k_bins {
            let da = qc[k - 1] * (gc[k - 1] - dot) / tau;
            let z = cache.spectra[ch][k];
            let mag = z.norm();
            if mag >= eps {
                g_spec[k] = (z * (da / mag)).conj();
            }
        }
        let back = plan.forward(&g_spec);
        for n in 0..l {
            grad[(n, ch)] = back[n].re;
        }
    }
    grad
}

/// KL period loss of a student signal against a fixed target distribution,
/// together with its gradient with respect to the signal.
pub fn period_loss_grad<T: Scalar>(
    y_s: &ArrayView2<T>,
    q_t: &PeriodDistribution<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    let plan = DftPlan::new(y_s.nrows().max(1));
    period_loss_grad_with(&plan, y_s, q_t, tau)
}

/// [`period_loss_grad`] reusing a prebuilt plan.
pub fn period_loss_grad_with<T: Scalar>(
    plan: &DftPlan<T>,
    y_s: &ArrayView2<T>,
    q_t: &PeriodDistribution<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    let cache = spectrum_cache(plan, y_s)?;
    let q_s = period_distribution(&cache.sp, tau)?;
    let loss = kl_div(q_t, &q_s)?;
    let dq = kl_student_side_dq(&q_t.q, &q_s.q);
    let grad = grad_through_distribution(plan, &cache, &q_s, &dq);
    Ok((loss, grad))
}

/// Gradient of `kl_div(Q(y_t), q_s)` with respect to the target-side signal
/// `y_t`; this is the path that reaches the feature regressor.
pub fn period_target_grad_with<T: Scalar>(
    plan: &DftPlan<T>,
    y_t: &ArrayView2<T>,
    q_s: &PeriodDistribution<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    let cache = spectrum_cache(plan, y_t)?;
    let q_t = period_distribution(&cache.sp, tau)?;
    let loss = kl_div(&q_t, q_s)?;
    let dq = kl_target_side_dq(&q_t.q, &q_s.q);
    let grad = grad_through_distribution(plan, &cache, &q_t, &dq);
    Ok((loss, grad))
}
