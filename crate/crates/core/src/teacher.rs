//! Frozen-teacher sources and the feature regressor.
//!
//! Published teacher architectures are out of scope here; a teacher is
//! anything that can serve per-window predictions `[S × C]` and features
//! `[D_t × C]` aligned to the stride-1 window indices of a split:
//!
//! - [`TeacherArtifact`]: a TDT1 file dumped by some external model run,
//! - [`oracle_noise_teacher`]: ground truth plus seeded Gaussian noise, with
//!   features from a fixed random projection (a controlled stand-in for
//!   experiments),
//! - [`LinearTeacher`]: a per-channel-shared ridge map from lookback to
//!   horizon, fit in closed form.
//!
//! Teacher tensors are read-only after construction; during distillation the
//! only trainable piece on this side is the affine [`Regressor`] aligning
//! teacher features to the student's feature width.

use ndarray::{Array1, Array2, Array3, ArrayView3, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataio::Split;
use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Artifact file magic.
pub const ARTIFACT_MAGIC: &[u8; 8] = b"TDTEACH1";

/// Frozen teacher predictions and features for a batch (or a whole split).
#[derive(Debug, Clone)]
pub struct TeacherOutputs<T> {
    /// `[B × S × C]`
    pub y_hat: Array3<T>,
    /// `[B × D_t × C]`
    pub h: Array3<T>,
}

impl<T: Scalar> TeacherOutputs<T> {
    pub fn len(&self) -> usize {
        self.y_hat.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.h.dim().1
    }

    fn gather(&self, indices: &[usize]) -> Result<TeacherOutputs<T>> {
        let n = self.len();
        let (_, s_len, c) = self.y_hat.dim();
        let d_t = self.feature_dim();
        let mut y_hat = Array3::zeros((indices.len(), s_len, c));
        let mut h = Array3::zeros((indices.len(), d_t, c));
        for (bi, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::TeacherAlignment(format!(
                    "window index {idx} outside the teacher's declared range of {n} windows"
                )));
            }
            y_hat
                .slice_mut(s![bi, .., ..])
                .assign(&self.y_hat.slice(s![idx, .., ..]));
            h.slice_mut(s![bi, .., ..]).assign(&self.h.slice(s![idx, .., ..]));
        }
        Ok(TeacherOutputs { y_hat, h })
    }
}

/// A source of frozen teacher outputs aligned to stride-1 window indices.
pub trait Teacher<T: Scalar> {
    fn feature_dim(&self) -> usize;

    /// Outputs for the given split-relative window indices. `x` carries the
    /// matching lookbacks for teachers that compute on the fly.
    fn batch_outputs(
        &self,
        split: Split,
        indices: &[usize],
        x: &ArrayView3<T>,
    ) -> Result<TeacherOutputs<T>>;
}

// ---------------------------------------------------------------------------
// oracle-noise teacher
// ---------------------------------------------------------------------------

/// Fixed seeded projection `[d_t × s]` with N(0, 1/s) entries.
pub fn random_projection<T: Scalar>(d_t: usize, s: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let scale = 1.0 / (s as f64).sqrt();
    Array2::from_shape_fn((d_t, s), |_| {
        let z: f64 = normal.sample(&mut rng);
        cast::<T>(z * scale)
    })
}

/// Teacher outputs from ground truth plus Gaussian noise of the given sigma;
/// features are the noisy predictions pushed through `proj`.
pub fn oracle_outputs<T: Scalar>(
    y: &ArrayView3<T>,
    sigma: f64,
    proj: &Array2<T>,
    noise_seed: u64,
) -> TeacherOutputs<T> {
    let (n, s_len, c) = y.dim();
    let d_t = proj.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = StandardNormal;
    let mut y_hat = y.to_owned();
    for v in y_hat.iter_mut() {
        let z: f64 = normal.sample(&mut rng);
        *v += cast::<T>(sigma * z);
    }
    let mut h = Array3::zeros((n, d_t, c));
    for b in 0..n {
        for ch in 0..c {
            for d in 0..d_t {
                let mut acc = T::zero();
                for si in 0..s_len {
                    acc += proj[(d, si)] * y_hat[(b, si, ch)];
                }
                h[(b, d, ch)] = acc;
            }
        }
    }
    TeacherOutputs { y_hat, h }
}

/// Materialize oracle-noise outputs for one split's ground-truth windows.
pub fn oracle_noise_teacher<T: Scalar>(
    y: &ArrayView3<T>,
    sigma: f64,
    d_t: usize,
    seed: u64,
) -> Result<TeacherOutputs<T>> {
    if sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    let proj = random_projection::<T>(d_t, y.dim().1, seed);
    Ok(oracle_outputs(y, sigma, &proj, seed.wrapping_add(1)))
}

// ---------------------------------------------------------------------------
// materialized teacher bank
// ---------------------------------------------------------------------------

/// Per-split materialized teacher outputs (oracle runs or loaded artifacts).
pub struct MaterializedTeacher<T> {
    splits: HashMap<Split, TeacherOutputs<T>>,
    d_t: usize,
}

impl<T: Scalar> MaterializedTeacher<T> {
    pub fn new(d_t: usize) -> Self {
        MaterializedTeacher {
            splits: HashMap::new(),
            d_t,
        }
    }

    pub fn insert(&mut self, split: Split, outputs: TeacherOutputs<T>) -> Result<()> {
        if outputs.feature_dim() != self.d_t {
            return Err(Error::shape(
                "materialized teacher",
                format!("feature dim {}", self.d_t),
                format!("{}", outputs.feature_dim()),
            ));
        }
        self.splits.insert(split, outputs);
        Ok(())
    }

    pub fn split(&self, split: Split) -> Option<&TeacherOutputs<T>> {
        self.splits.get(&split)
    }

    /// Build an oracle-noise teacher covering the given splits of a dataset.
    /// One projection is shared across splits; noise streams are per split.
    pub fn from_oracle(
        ds: &crate::dataio::SeriesDataset<T>,
        splits: &[Split],
        t: usize,
        s: usize,
        sigma: f64,
        d_t: usize,
        seed: u64,
    ) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::invalid(format!("sigma must be nonnegative, got {sigma}")));
        }
        let proj = random_projection::<T>(d_t, s, seed);
        let mut bank = MaterializedTeacher::new(d_t);
        for split in splits {
            // noise stream keyed by split identity so a bank over any subset
            // of splits reproduces the same outputs
            let ordinal = match split {
                Split::Train => 0u64,
                Split::Val => 1,
                Split::Test => 2,
            };
            let n = ds.window_count(*split, t, s)?;
            let all: Vec<usize> = (0..n).collect();
            let batch = ds.gather_windows(*split, t, s, &all)?;
            let outputs = oracle_outputs(&batch.y.view(), sigma, &proj, seed.wrapping_add(1 + ordinal));
            bank.insert(*split, outputs)?;
        }
        Ok(bank)
    }
}

impl<T: Scalar> Teacher<T> for MaterializedTeacher<T> {
    fn feature_dim(&self) -> usize {
        self.d_t
    }

    fn batch_outputs(
        &self,
        split: Split,
        indices: &[usize],
        _x: &ArrayView3<T>,
    ) -> Result<TeacherOutputs<T>> {
        let outputs = self.splits.get(&split).ok_or_else(|| {
            Error::TeacherAlignment(format!("teacher has no outputs for split {split}"))
        })?;
        outputs.gather(indices)
    }
}

// ---------------------------------------------------------------------------
// linear ridge teacher
// ---------------------------------------------------------------------------

/// Per-channel-shared linear forecaster `y = A·x` fit by ridge regression.
/// Features are the last `d_t` lookback values through a fixed seeded map.
pub struct LinearTeacher<T> {
    pub map: Array2<T>,  // [S × T]
    pub proj: Array2<T>, // [D_t × D_t]
    d_t: usize,
}

/// Closed-form ridge fit over `(X, Y)` window pairs: minimizes
/// `‖A·x − y‖² + λ‖A‖²` via the normal equations with a Cholesky solve.
pub fn train_linear_teacher<T: Scalar>(
    x: &ArrayView3<T>,
    y: &ArrayView3<T>,
    lambda: f64,
    d_t: usize,
    seed: u64,
) -> Result<LinearTeacher<T>> {
    if lambda <= 0.0 {
        return Err(Error::invalid(format!(
            "ridge lambda must be positive to keep the normal matrix nonsingular, got {lambda}"
        )));
    }
    let (n, t, c) = x.dim();
    let (ny, s_len, cy) = y.dim();
    if n != ny || c != cy {
        return Err(Error::shape(
            "train_linear_teacher",
            format!("matching window counts/channels ({n}, {c})"),
            format!("({ny}, {cy})"),
        ));
    }
    if d_t > t {
        return Err(Error::invalid(format!(
            "teacher feature dim {d_t} exceeds lookback {t}"
        )));
    }
    // gram = Σ x xᵀ + λI, cross = Σ y xᵀ, summed over windows and channels
    let mut gram = Array2::<T>::zeros((t, t));
    let mut cross = Array2::<T>::zeros((s_len, t));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..t {
                let xi = x[(b, i, ch)];
                for j in i..t {
                    gram[(i, j)] += xi * x[(b, j, ch)];
                }
            }
            for si in 0..s_len {
                let yv = y[(b, si, ch)];
                for j in 0..t {
                    cross[(si, j)] += yv * x[(b, j, ch)];
                }
            }
        }
    }
    for i in 0..t {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += cast::<T>(lambda);
    }
    let chol = cholesky(&gram)?;
    // solve G·Aᵀ = crossᵀ column by column
    let mut map = Array2::<T>::zeros((s_len, t));
    let mut rhs = vec![T::zero(); t];
    for si in 0..s_len {
        for j in 0..t {
            rhs[j] = cross[(si, j)];
        }
        let sol = chol_solve(&chol, &rhs);
        for j in 0..t {
            map[(si, j)] = sol[j];
        }
    }
    Ok(LinearTeacher {
        map,
        proj: random_projection::<T>(d_t, d_t, seed),
        d_t,
    })
}

fn cholesky<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    let mut l = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= T::zero() {
                    return Err(Error::invalid(
                        "normal matrix is not positive definite (singular fit)",
                    ));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

fn chol_solve<T: Scalar>(l: &Array2<T>, b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * y[k];
        }
        y[i] = sum / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

impl<T: Scalar> LinearTeacher<T> {
    pub fn predict(&self, x: &ArrayView3<T>) -> TeacherOutputs<T> {
        let (b, t, c) = x.dim();
        let s_len = self.map.nrows();
        let mut y_hat = Array3::zeros((b, s_len, c));
        let mut h = Array3::zeros((b, self.d_t, c));
        for bi in 0..b {
            for ch in 0..c {
                for si in 0..s_len {
                    let mut acc = T::zero();
                    for ti in 0..t {
                        acc += self.map[(si, ti)] * x[(bi, ti, ch)];
                    }
                    y_hat[(bi, si, ch)] = acc;
                }
                for di in 0..self.d_t {
                    let mut acc = T::zero();
                    for k in 0..self.d_t {
                        acc += self.proj[(di, k)] * x[(bi, t - self.d_t + k, ch)];
                    }
                    h[(bi, di, ch)] = acc;
                }
            }
        }
        TeacherOutputs { y_hat, h }
    }
}

impl<T: Scalar> Teacher<T> for LinearTeacher<T> {
    fn feature_dim(&self) -> usize {
        self.d_t
    }

    fn batch_outputs(
        &self,
        _split: Split,
        _indices: &[usize],
        x: &ArrayView3<T>,
    ) -> Result<TeacherOutputs<T>> {
        Ok(self.predict(x))
    }
}

// ---------------------------------------------------------------------------
// regressor
// ---------------------------------------------------------------------------

/// Affine map aligning teacher features `[D_t]` to student features `[D]`.
#[derive(Debug, Clone)]
pub struct Regressor<T> {
    pub w: Array2<T>, // [D × D_t]
    pub b: Array1<T>, // [D]
}

/// Gradients mirroring [`Regressor`].
#[derive(Debug, Clone)]
pub struct RegressorGrads<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Regressor<T> {
    /// Seeded uniform init in `±1/sqrt(D_t)`, zero bias.
    pub fn init(d: usize, d_t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_t as f64).sqrt();
        Regressor {
            w: Array2::from_shape_fn((d, d_t), |_| cast::<T>(rng.random_range(-bound..bound))),
            b: Array1::zeros(d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Regressor {
            w: Array2::eye(d),
            b: Array1::zeros(d),
        }
    }

    /// Per-channel affine application to `[B × D_t × C]` features.
    pub fn apply(&self, h_t: &ArrayView3<T>) -> Result<Array3<T>> {
        let (b, d_t, c) = h_t.dim();
        if d_t != self.w.ncols() {
            return Err(Error::shape(
                "regressor_apply",
                format!("feature dim {}", self.w.ncols()),
                format!("{d_t}"),
            ));
        }
        let d = self.w.nrows();
        let mut out = Array3::zeros((b, d, c));
        for bi in 0..b {
            for ch in 0..c {
                for di in 0..d {
                    let mut acc = self.b[di];
                    for k in 0..d_t {
                        acc += self.w[(di, k)] * h_t[(bi, k, ch)];
                    }
                    out[(bi, di, ch)] = acc;
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> RegressorGrads<T> {
    pub fn zeros_like(r: &Regressor<T>) -> Self {
        RegressorGrads {
            w: Array2::zeros(r.w.dim()),
            b: Array1::zeros(r.b.len()),
        }
    }

    /// Accumulate the adjoint of [`Regressor::apply`]: given `g` = dL/d(h'_t)
    /// and the raw teacher features, add the parameter gradients.
    pub fn accumulate(&mut self, g: &ArrayView3<T>, h_t: &ArrayView3<T>) {
        let (b, d, c) = g.dim();
        let d_t = h_t.dim().1;
        for bi in 0..b {
            for ch in 0..c {
                for di in 0..d {
                    let gv = g[(bi, di, ch)];
                    self.b[di] += gv;
                    for k in 0..d_t {
                        self.w[(di, k)] += gv * h_t[(bi, k, ch)];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// TDT1 artifact format
// ---------------------------------------------------------------------------

/// Header of a TDT1 teacher artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub version: u32,
    pub split_id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "D_t")]
    pub d_t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub dtype: String,
    pub layout: String,
}

impl ArtifactHeader {
    pub fn new(split: Split, t: usize, s: usize, c: usize, d_t: usize, n: usize) -> Self {
        ArtifactHeader {
            version: 1,
            split_id: split.id().to_string(),
            t,
            s,
            c,
            d_t,
            n,
            dtype: "f32".to_string(),
            layout: "sample-major".to_string(),
        }
    }

    /// Verify that the artifact lines up with the run's window accounting.
    pub fn check_alignment(&self, split: Split, t: usize, s: usize, n: usize) -> Result<()> {
        if self.split_id != split.id() || self.t != t || self.s != s || self.n != n {
            return Err(Error::TeacherAlignment(format!(
                "artifact declares (split={}, T={}, S={}, N={}) but the run expects (split={}, T={t}, S={s}, N={n})",
                self.split_id, self.t, self.s, self.n, split.id()
            )));
        }
        Ok(())
    }
}

/// A loaded TDT1 artifact: header plus the full per-window outputs.
#[derive(Debug)]
pub struct TeacherArtifact<T> {
    pub header: ArtifactHeader,
    pub outputs: TeacherOutputs<T>,
}

/// Write a TDT1 artifact: magic, u32-LE header length, UTF-8 JSON header,
/// then predictions and features as little-endian f32 in sample-major order
/// (sample, then time, then channel).
pub fn write_teacher_artifact<T: Scalar>(
    path: impl AsRef<Path>,
    header: &ArtifactHeader,
    outputs: &TeacherOutputs<T>,
) -> Result<()> {
    let path = path.as_ref();
    let (n, s_len, c) = outputs.y_hat.dim();
    let d_t = outputs.feature_dim();
    if n != header.n || s_len != header.s || c != header.c || d_t != header.d_t {
        return Err(Error::shape(
            "write_teacher_artifact",
            format!("(N={}, S={}, C={}, D_t={})", header.n, header.s, header.c, header.d_t),
            format!("(N={n}, S={s_len}, C={c}, D_t={d_t})"),
        ));
    }
    let header_bytes = serde_json::to_vec(header).expect("header serializes");
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ARTIFACT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for b in 0..n {
        for si in 0..s_len {
            for ch in 0..c {
                let v = outputs.y_hat[(b, si, ch)].to_f64().unwrap_or(f64::NAN) as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    for b in 0..n {
        for di in 0..d_t {
            for ch in 0..c {
                let v = outputs.h[(b, di, ch)].to_f64().unwrap_or(f64::NAN) as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a TDT1 artifact, verifying magic, header, dtype, and payload size.
pub fn load_teacher_artifact<T: Scalar>(path: impl AsRef<Path>) -> Result<TeacherArtifact<T>> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&path_str, "file shorter than magic"))?;
    if &magic != ARTIFACT_MAGIC {
        return Err(Error::format(&path_str, "bad magic, not a TDT1 teacher artifact"));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::format(&path_str, "missing header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(Error::format(&path_str, format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(&path_str, "truncated header"))?;
    let header: ArtifactHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(&path_str, format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(Error::format(&path_str, format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32" {
        return Err(Error::format(&path_str, format!("dtype must be f32, got {}", header.dtype)));
    }
    if header.layout != "sample-major" {
        return Err(Error::format(
            &path_str,
            format!("layout must be sample-major, got {}", header.layout),
        ));
    }

    let pred_count = header.n * header.s * header.c;
    let feat_count = header.n * header.d_t * header.c;
    let expected_bytes = 4 * (pred_count + feat_count);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected_bytes {
        return Err(Error::format(
            &path_str,
            format!("payload size mismatch: expected {expected_bytes} bytes, got {}", payload.len()),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut y_hat = Array3::zeros((header.n, header.s, header.c));
    for b in 0..header.n {
        for si in 0..header.s {
            for ch in 0..header.c {
                y_hat[(b, si, ch)] = cast::<T>(floats.next().unwrap() as f64);
            }
        }
    }
    let mut h = Array3::zeros((header.n, header.d_t, header.c));
    for b in 0..header.n {
        for di in 0..header.d_t {
            for ch in 0..header.c {
                h[(b, di, ch)] = cast::<T>(floats.next().unwrap() as f64);
            }
        }
    }
    Ok(TeacherArtifact {
        header,
        outputs: TeacherOutputs { y_hat, h },
    })
}
