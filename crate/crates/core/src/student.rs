//! The channel-independent decomposition-MLP forecaster.
//!
//! Each channel of each window is processed independently: the lookback is
//! instance-normalized, split into seasonal and trend parts by a centered
//! moving average, pushed through one hidden layer per part (shared weights
//! across channels), summed into the internal feature `h`, projected to the
//! horizon, and de-normalized. Gradients are assembled by hand in
//! [`backward`]; [`forward_cached`] keeps the intermediates needed for that.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Epsilon added to each window's per-channel standard deviation.
pub const NORM_EPS: f64 = 1e-5;

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TDSTU1\n";

/// Instance-normalization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Per-window z-score with de-normalization.
    #[serde(rename = "non-stationary")]
    NonStationary,
    /// Per-window z-score plus a learnable per-channel affine.
    #[serde(rename = "revin")]
    RevIn,
}

impl NormMode {
    pub fn id(&self) -> &'static str {
        match self {
            NormMode::NonStationary => "non-stationary",
            NormMode::RevIn => "revin",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "non-stationary" => Ok(NormMode::NonStationary),
            "revin" => Ok(NormMode::RevIn),
            other => Err(Error::invalid(format!("unknown norm mode \"{other}\""))),
        }
    }
}

/// Student parameters. Weight matrices are shared across channels; only the
/// optional revin affine is per-channel.
#[derive(Debug, Clone)]
pub struct StudentParams<T> {
    pub w1_seasonal: Array2<T>, // [D × T]
    pub b1_seasonal: Array1<T>, // [D]
    pub w1_trend: Array2<T>,    // [D × T]
    pub b1_trend: Array1<T>,    // [D]
    pub w2: Array2<T>,          // [S × D]
    pub b2: Array1<T>,          // [S]
    pub revin_gamma: Option<Array1<T>>, // [C]
    pub revin_beta: Option<Array1<T>>,  // [C]
    pub kernel: usize,
    pub norm_mode: NormMode,
    pub channels: usize,
    pub seed: u64,
}

/// Gradients mirroring [`StudentParams`].
#[derive(Debug, Clone)]
pub struct StudentGrads<T> {
    pub w1_seasonal: Array2<T>,
    pub b1_seasonal: Array1<T>,
    pub w1_trend: Array2<T>,
    pub b1_trend: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub revin_gamma: Option<Array1<T>>,
    pub revin_beta: Option<Array1<T>>,
}

/// Predictions plus internal features for one batch.
#[derive(Debug, Clone)]
pub struct StudentOutput<T> {
    /// De-normalized predictions, `[B × S × C]`.
    pub y_hat: Array3<T>,
    /// Internal features in normalized space, `[B × D × C]`.
    pub h: Array3<T>,
    /// Per-sample per-channel (mean, std+eps) used for de-normalization.
    pub norm_stats: Vec<(T, T)>,
}

/// Intermediates of [`forward_cached`], in flattened `[rows × (B·C)]` layout
/// with column `j = b·C + c`.
pub struct ForwardCache<T> {
    z_pre: Option<Array2<T>>, // normalized input before the revin affine
    z: Array2<T>,             // [T × BC]
    seasonal: Array2<T>,      // [T × BC]
    trend: Array2<T>,         // [T × BC]
    a1: Array2<T>,            // [D × BC]
    a2: Array2<T>,            // [D × BC]
    h: Array2<T>,             // [D × BC]
    yn: Array2<T>,            // [S × BC]
    sigma: Vec<T>,            // std+eps per column
    batch: usize,
}

impl<T: Scalar> StudentParams<T> {
    pub fn lookback(&self) -> usize {
        self.w1_seasonal.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1_seasonal.nrows()
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = self.w1_seasonal.len()
            + self.b1_seasonal.len()
            + self.w1_trend.len()
            + self.b1_trend.len()
            + self.w2.len()
            + self.b2.len();
        if let Some(g) = &self.revin_gamma {
            n += g.len();
        }
        if let Some(b) = &self.revin_beta {
            n += b.len();
        }
        n
    }
}

/// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// revin affine at identity.
pub fn init_params<T: Scalar>(
    t: usize,
    s: usize,
    d: usize,
    channels: usize,
    norm_mode: NormMode,
    kernel: usize,
    seed: u64,
) -> Result<StudentParams<T>> {
    if t == 0 || s == 0 || d == 0 || channels == 0 {
        return Err(Error::invalid("T, S, D, and C must all be at least 1"));
    }
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "decomposition kernel must be odd and positive, got {kernel}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform_mat = |rows: usize, cols: usize, fan_in: usize| -> Array2<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| cast::<T>(rng.random_range(-bound..bound)))
    };
    let w1_seasonal = uniform_mat(d, t, t);
    let w1_trend = uniform_mat(d, t, t);
    let w2 = uniform_mat(s, d, d);
    let (revin_gamma, revin_beta) = match norm_mode {
        NormMode::RevIn => (
            Some(Array1::from_elem(channels, T::one())),
            Some(Array1::from_elem(channels, T::zero())),
        ),
        NormMode::NonStationary => (None, None),
    };
    Ok(StudentParams {
        w1_seasonal,
        b1_seasonal: Array1::zeros(d),
        w1_trend,
        b1_trend: Array1::zeros(d),
        w2,
        b2: Array1::zeros(s),
        revin_gamma,
        revin_beta,
        kernel,
        norm_mode,
        channels,
        seed,
    })
}

/// Centered moving average with replicate padding, applied down each column.
fn moving_average_into<T: Scalar>(x: &ArrayView2<T>, kernel: usize, out: &mut Array2<T>) {
    let (t, c) = x.dim();
    let half = (kernel - 1) / 2;
    let inv_k = T::one() / cast::<T>(kernel as f64);
    for ch in 0..c {
        for i in 0..t {
            let mut acc = T::zero();
            for o in 0..kernel {
                let j = (i + o).saturating_sub(half).min(t - 1);
                acc += x[(j, ch)];
            }
            out[(i, ch)] = acc * inv_k;
        }
    }
}

/// Adjoint of the moving average: scatter each output gradient back to the
/// clamped input positions with weight 1/kernel.
fn moving_average_adjoint_into<T: Scalar>(g: &ArrayView2<T>, kernel: usize, out: &mut Array2<T>) {
    let (t, c) = g.dim();
    let half = (kernel - 1) / 2;
    let inv_k = T::one() / cast::<T>(kernel as f64);
    out.fill(T::zero());
    for ch in 0..c {
        for i in 0..t {
            let v = g[(i, ch)] * inv_k;
            for o in 0..kernel {
                let j = (i + o).saturating_sub(half).min(t - 1);
                out[(j, ch)] += v;
            }
        }
    }
}

/// Series decomposition: `trend` is the centered moving average with
/// replicate padding, `seasonal = x - trend`, so the parts sum back exactly.
pub fn decompose<T: Scalar>(x: &ArrayView2<T>, kernel: usize) -> Result<(Array2<T>, Array2<T>)> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "decomposition kernel must be odd and positive, got {kernel}"
        )));
    }
    let mut trend = Array2::zeros(x.dim());
    moving_average_into(x, kernel, &mut trend);
    let seasonal = x.to_owned() - &trend;
    Ok((seasonal, trend))
}

fn relu_in_place<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    a.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Forward pass producing predictions and features.
pub fn forward<T: Scalar>(params: &StudentParams<T>, x: &ArrayView3<T>) -> Result<StudentOutput<T>> {
    Ok(forward_cached(params, x)?.0)
}

/// Forward pass that also returns the cache needed by [`backward`].
pub fn forward_cached<T: Scalar>(
    params: &StudentParams<T>,
    x: &ArrayView3<T>,
) -> Result<(StudentOutput<T>, ForwardCache<T>)> {
    let (b, t, c) = x.dim();
    if t != params.lookback() {
        return Err(Error::shape(
            "student forward",
            format!("lookback {}", params.lookback()),
            format!("{t}"),
        ));
    }
    if params.norm_mode == NormMode::RevIn && c != params.channels {
        return Err(Error::shape(
            "student forward",
            format!("{} channels", params.channels),
            format!("{c}"),
        ));
    }
    let s_len = params.horizon();
    let d = params.hidden_dim();
    let bc = b * c;
    let eps = cast::<T>(NORM_EPS);
    let inv_t = T::one() / cast::<T>(t as f64);

    // instance-normalize into flattened [T × BC] layout, column j = b·C + c
    let mut z = Array2::zeros((t, bc));
    let mut mu = vec![T::zero(); bc];
    let mut sigma = vec![T::zero(); bc];
    for bi in 0..b {
        for ch in 0..c {
            let j = bi * c + ch;
            let mut mean = T::zero();
            for ti in 0..t {
                mean += x[(bi, ti, ch)];
            }
            mean *= inv_t;
            let mut var = T::zero();
            for ti in 0..t {
                let dlt = x[(bi, ti, ch)] - mean;
                var += dlt * dlt;
            }
            var *= inv_t;
            let sd = var.sqrt() + eps;
            mu[j] = mean;
            sigma[j] = sd;
            for ti in 0..t {
                z[(ti, j)] = (x[(bi, ti, ch)] - mean) / sd;
            }
        }
    }

    let z_pre = if params.norm_mode == NormMode::RevIn {
        let pre = z.clone();
        let gamma = params.revin_gamma.as_ref().unwrap();
        let beta = params.revin_beta.as_ref().unwrap();
        for j in 0..bc {
            let ch = j % c;
            let (g, bt) = (gamma[ch], beta[ch]);
            for ti in 0..t {
                z[(ti, j)] = g * z[(ti, j)] + bt;
            }
        }
        Some(pre)
    } else {
        None
    };

    let mut trend = Array2::zeros((t, bc));
    moving_average_into(&z.view(), params.kernel, &mut trend);
    let seasonal = &z - &trend;

    let a1 = params.w1_seasonal.dot(&seasonal) + params.b1_seasonal.view().insert_axis(Axis(1));
    let a2 = params.w1_trend.dot(&trend) + params.b1_trend.view().insert_axis(Axis(1));
    let h = relu_in_place(&a1) + relu_in_place(&a2);
    let yn = params.w2.dot(&h) + params.b2.view().insert_axis(Axis(1));

    // de-normalize: revin inverts its affine first
    let mut y_hat = Array3::zeros((b, s_len, c));
    let mut h_out = Array3::zeros((b, d, c));
    for bi in 0..b {
        for ch in 0..c {
            let j = bi * c + ch;
            let (denorm_scale, denorm_shift) = match params.norm_mode {
                NormMode::NonStationary => (T::one(), T::zero()),
                NormMode::RevIn => {
                    let g = params.revin_gamma.as_ref().unwrap()[ch];
                    let bt = params.revin_beta.as_ref().unwrap()[ch];
                    (T::one() / g, -bt / g)
                }
            };
            for si in 0..s_len {
                let yd = yn[(si, j)] * denorm_scale + denorm_shift;
                y_hat[(bi, si, ch)] = yd * sigma[j] + mu[j];
            }
            for di in 0..d {
                h_out[(bi, di, ch)] = h[(di, j)];
            }
        }
    }

    let norm_stats = mu.iter().zip(sigma.iter()).map(|(m, s)| (*m, *s)).collect();
    Ok((
        StudentOutput {
            y_hat,
            h: h_out,
            norm_stats,
        },
        ForwardCache {
            z_pre,
            z,
            seasonal,
            trend,
            a1,
            a2,
            h,
            yn,
            sigma,
            batch: b,
        },
    ))
}

/// Reverse pass: given adjoints of the de-normalized predictions (`gy`,
/// `[B × S × C]`) and of the features (`gh_ext`, `[B × D × C]`), produce
/// parameter gradients.
pub fn backward<T: Scalar>(
    params: &StudentParams<T>,
    cache: &ForwardCache<T>,
    gy: &ArrayView3<T>,
    gh_ext: &ArrayView3<T>,
) -> Result<StudentGrads<T>> {
    let b = cache.batch;
    let bc = cache.z.ncols();
    let c = bc / b;
    let s_len = params.horizon();
    let d = params.hidden_dim();
    if gy.dim() != (b, s_len, c) {
        return Err(Error::shape(
            "student backward",
            format!("({b}, {s_len}, {c})"),
            format!("{:?}", gy.dim()),
        ));
    }
    if gh_ext.dim() != (b, d, c) {
        return Err(Error::shape(
            "student backward",
            format!("({b}, {d}, {c})"),
            format!("{:?}", gh_ext.dim()),
        ));
    }

    let mut g_gamma = params.revin_gamma.as_ref().map(|g| Array1::zeros(g.len()));
    let mut g_beta = params.revin_beta.as_ref().map(|g| Array1::zeros(g.len()));

    // adjoint of de-normalization into flattened layout
    let mut g_yn = Array2::zeros((s_len, bc));
    for bi in 0..b {
        for ch in 0..c {
            let j = bi * c + ch;
            let sd = cache.sigma[j];
            match params.norm_mode {
                NormMode::NonStationary => {
                    for si in 0..s_len {
                        g_yn[(si, j)] = gy[(bi, si, ch)] * sd;
                    }
                }
                NormMode::RevIn => {
                    let g = params.revin_gamma.as_ref().unwrap()[ch];
                    let bt = params.revin_beta.as_ref().unwrap()[ch];
                    let gg = g_gamma.as_mut().unwrap();
                    let gb = g_beta.as_mut().unwrap();
                    for si in 0..s_len {
                        let gyd = gy[(bi, si, ch)] * sd;
                        g_yn[(si, j)] = gyd / g;
                        // yd = (yn - β)/γ
                        gb[ch] -= gyd / g;
                        gg[ch] -= gyd * (cache.yn[(si, j)] - bt) / (g * g);
                    }
                }
            }
        }
    }

    let g_w2 = g_yn.dot(&cache.h.t());
    let g_b2 = g_yn.sum_axis(Axis(1));
    let mut g_h = params.w2.t().dot(&g_yn);
    for bi in 0..b {
        for ch in 0..c {
            let j = bi * c + ch;
            for di in 0..d {
                g_h[(di, j)] += gh_ext[(bi, di, ch)];
            }
        }
    }

    // relu subgradient is 0 at 0
    let mut g_a1 = g_h.clone();
    let mut g_a2 = g_h;
    for (g, a) in g_a1.iter_mut().zip(cache.a1.iter()) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
    for (g, a) in g_a2.iter_mut().zip(cache.a2.iter()) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }

    let g_w1_seasonal = g_a1.dot(&cache.seasonal.t());
    let g_b1_seasonal = g_a1.sum_axis(Axis(1));
    let g_w1_trend = g_a2.dot(&cache.trend.t());
    let g_b1_trend = g_a2.sum_axis(Axis(1));

    // Only the revin affine sits upstream of the normalized input, so the
    // input adjoint is needed in revin mode only.
    if params.norm_mode == NormMode::RevIn {
        // decompose adjoint: seasonal = z - MA(z), trend = MA(z)
        // => g_z = g_s + MAᵀ(g_t - g_s)
        let g_seasonal = params.w1_seasonal.t().dot(&g_a1);
        let g_trend = params.w1_trend.t().dot(&g_a2);
        let diff = &g_trend - &g_seasonal;
        let mut g_ma = Array2::zeros(diff.dim());
        moving_average_adjoint_into(&diff.view(), params.kernel, &mut g_ma);
        let g_z = g_seasonal + g_ma;
        // input affine: z = γ·z_pre + β
        let z_pre = cache.z_pre.as_ref().expect("revin cache has z_pre");
        let gg = g_gamma.as_mut().unwrap();
        let gb = g_beta.as_mut().unwrap();
        let t_len = g_z.nrows();
        for j in 0..bc {
            let ch = j % c;
            for ti in 0..t_len {
                gg[ch] += g_z[(ti, j)] * z_pre[(ti, j)];
                gb[ch] += g_z[(ti, j)];
            }
        }
    }

    Ok(StudentGrads {
        w1_seasonal: g_w1_seasonal,
        b1_seasonal: g_b1_seasonal,
        w1_trend: g_w1_trend,
        b1_trend: g_b1_trend,
        w2: g_w2,
        b2: g_b2,
        revin_gamma: g_gamma,
        revin_beta: g_beta,
    })
}

impl<T: Scalar> StudentGrads<T> {
    pub fn zeros_like(params: &StudentParams<T>) -> Self {
        StudentGrads {
            w1_seasonal: Array2::zeros(params.w1_seasonal.dim()),
            b1_seasonal: Array1::zeros(params.b1_seasonal.len()),
            w1_trend: Array2::zeros(params.w1_trend.dim()),
            b1_trend: Array1::zeros(params.b1_trend.len()),
            w2: Array2::zeros(params.w2.dim()),
            b2: Array1::zeros(params.b2.len()),
            revin_gamma: params.revin_gamma.as_ref().map(|g| Array1::zeros(g.len())),
            revin_beta: params.revin_beta.as_ref().map(|g| Array1::zeros(g.len())),
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    norm_mode: String,
    kernel: usize,
    seed: u64,
}

fn write_tensor_f64<T: Scalar, W: Write>(w: &mut W, data: impl IntoIterator<Item = T>) -> Result<()> {
    for v in data {
        let bits = v.to_f64().unwrap_or(f64::NAN);
        w.write_all(&bits.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_f64<T: Scalar, R: Read>(r: &mut R, len: usize, path: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf).map_err(|_| {
        Error::format(path, format!("truncated tensor payload: expected {} bytes", len * 8))
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| cast::<T>(f64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

impl<T: Scalar> StudentParams<T> {
    /// Write the checkpoint: magic, length-prefixed JSON metadata, then all
    /// parameter tensors as little-endian f64 in field order.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = CheckpointMeta {
            t: self.lookback(),
            s: self.horizon(),
            d: self.hidden_dim(),
            c: self.channels,
            norm_mode: self.norm_mode.id().to_string(),
            kernel: self.kernel,
            seed: self.seed,
        };
        let meta_bytes = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        write_tensor_f64(&mut w, self.w1_seasonal.iter().cloned())?;
        write_tensor_f64(&mut w, self.b1_seasonal.iter().cloned())?;
        write_tensor_f64(&mut w, self.w1_trend.iter().cloned())?;
        write_tensor_f64(&mut w, self.b1_trend.iter().cloned())?;
        write_tensor_f64(&mut w, self.w2.iter().cloned())?;
        write_tensor_f64(&mut w, self.b2.iter().cloned())?;
        if let Some(g) = &self.revin_gamma {
            write_tensor_f64(&mut w, g.iter().cloned())?;
        }
        if let Some(b) = &self.revin_beta {
            write_tensor_f64(&mut w, b.iter().cloned())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StudentParams<T>> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(&path_str, "file shorter than magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(&path_str, "bad magic, not a TDSTU1 checkpoint"));
        }
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes)
            .map_err(|_| Error::format(&path_str, "missing metadata length"))?;
        let meta_len = u32::from_le_bytes(len_bytes) as usize;
        if meta_len > 1 << 20 {
            return Err(Error::format(&path_str, format!("implausible metadata length {meta_len}")));
        }
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)
            .map_err(|_| Error::format(&path_str, "truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format(&path_str, format!("bad metadata: {e}")))?;
        let norm_mode = NormMode::from_id(&meta.norm_mode)?;

        let w1_seasonal =
            Array2::from_shape_vec((meta.d, meta.t), read_exact_f64(&mut r, meta.d * meta.t, &path_str)?)
                .expect("shape matches length");
        let b1_seasonal = Array1::from_vec(read_exact_f64(&mut r, meta.d, &path_str)?);
        let w1_trend =
            Array2::from_shape_vec((meta.d, meta.t), read_exact_f64(&mut r, meta.d * meta.t, &path_str)?)
                .expect("shape matches length");
        let b1_trend = Array1::from_vec(read_exact_f64(&mut r, meta.d, &path_str)?);
        let w2 = Array2::from_shape_vec((meta.s, meta.d), read_exact_f64(&mut r, meta.s * meta.d, &path_str)?)
            .expect("shape matches length");
        let b2 = Array1::from_vec(read_exact_f64(&mut r, meta.s, &path_str)?);
        let (revin_gamma, revin_beta) = match norm_mode {
            NormMode::RevIn => (
                Some(Array1::from_vec(read_exact_f64(&mut r, meta.c, &path_str)?)),
                Some(Array1::from_vec(read_exact_f64(&mut r, meta.c, &path_str)?)),
            ),
            NormMode::NonStationary => (None, None),
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format(
                &path_str,
                format!("{} trailing bytes after parameter tensors", rest.len()),
            ));
        }
        Ok(StudentParams {
            w1_seasonal,
            b1_seasonal,
            w1_trend,
            b1_trend,
            w2,
            b2,
            revin_gamma,
            revin_beta,
            kernel: meta.kernel,
            norm_mode,
            channels: meta.c,
            seed: meta.seed,
        })
    }
}
