//! Parsing and construction of teacher sources shared by `train-teacher`,
//! `distill`, and `analyze`.

use std::path::{Path, PathBuf};

use tsdistill_core::dataio::{SeriesDataset, Split};
use tsdistill_core::teacher::{
    load_teacher_artifact, train_linear_teacher, LinearTeacher, MaterializedTeacher, Teacher,
};
use tsdistill_core::{Error, Real, Result};

/// Parsed `--teacher` specification.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSpec {
    /// Load `teacher_<split>.tdt1` artifacts from the output directory.
    Artifact,
    /// Closed-form ridge teacher fit on the train split.
    Linear { lambda: f64 },
    /// Ground truth plus Gaussian noise.
    Oracle { sigma: f64 },
}

impl TeacherSpec {
    /// Accepts `artifact`, `linear[:lambda=X]`, `oracle[:sigma=X]`.
    pub fn parse(spec: &str) -> Result<TeacherSpec> {
        let (kind, params) = match spec.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (spec, None),
        };
        let parse_param = |params: Option<&str>, key: &str, default: f64| -> Result<f64> {
            match params {
                None => Ok(default),
                Some(p) => {
                    let (k, v) = p.split_once('=').ok_or_else(|| {
                        Error::InvalidArgument(format!("teacher parameter \"{p}\" must be `{key}=value`"))
                    })?;
                    if k != key {
                        return Err(Error::InvalidArgument(format!(
                            "unknown teacher parameter \"{k}\" (expected \"{key}\")"
                        )));
                    }
                    v.parse()
                        .map_err(|e| Error::InvalidArgument(format!("bad value \"{v}\" for {key}: {e}")))
                }
            }
        };
        match kind {
            "artifact" => {
                if params.is_some() {
                    return Err(Error::InvalidArgument("artifact teacher takes no parameters".into()));
                }
                Ok(TeacherSpec::Artifact)
            }
            "linear" => Ok(TeacherSpec::Linear {
                lambda: parse_param(params, "lambda", 1e-3)?,
            }),
            "oracle" => Ok(TeacherSpec::Oracle {
                sigma: parse_param(params, "sigma", 0.2)?,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown teacher kind \"{other}\" (expected artifact, linear, or oracle)"
            ))),
        }
    }
}

pub fn artifact_path(out_dir: &Path, split: Split) -> PathBuf {
    out_dir.join(format!("teacher_{}.tdt1", split.id()))
}

/// Materialize a teacher covering the given splits.
#[allow(clippy::too_many_arguments)]
pub fn build_teacher(
    spec: &TeacherSpec,
    out_dir: &Path,
    ds: &SeriesDataset<Real>,
    splits: &[Split],
    t: usize,
    s: usize,
    d_t: usize,
    teacher_seed: u64,
) -> Result<Box<dyn Teacher<Real>>> {
    match spec {
        TeacherSpec::Artifact => {
            let mut bank: Option<MaterializedTeacher<Real>> = None;
            for split in splits {
                let path = artifact_path(out_dir, *split);
                let artifact = load_teacher_artifact::<Real>(&path)?;
                let n = ds.window_count(*split, t, s)?;
                artifact.header.check_alignment(*split, t, s, n)?;
                if ds.num_channels() != artifact.header.c {
                    return Err(Error::TeacherAlignment(format!(
                        "artifact {} has {} channels, dataset has {}",
                        path.display(),
                        artifact.header.c,
                        ds.num_channels()
                    )));
                }
                let bank = bank.get_or_insert_with(|| MaterializedTeacher::new(artifact.header.d_t));
                bank.insert(*split, artifact.outputs)?;
            }
            Ok(Box::new(bank.expect("at least one split requested")))
        }
        TeacherSpec::Linear { lambda } => {
            let teacher = fit_linear(ds, t, s, *lambda, d_t, teacher_seed)?;
            Ok(Box::new(teacher))
        }
        TeacherSpec::Oracle { sigma } => {
            let bank = MaterializedTeacher::from_oracle(ds, splits, t, s, *sigma, d_t, teacher_seed)?;
            Ok(Box::new(bank))
        }
    }
}

/// Ridge-fit the linear teacher on the full train split.
pub fn fit_linear(
    ds: &SeriesDataset<Real>,
    t: usize,
    s: usize,
    lambda: f64,
    d_t: usize,
    seed: u64,
) -> Result<LinearTeacher<Real>> {
    let n = ds.window_count(Split::Train, t, s)?;
    let all: Vec<usize> = (0..n).collect();
    let train = ds.gather_windows(Split::Train, t, s, &all)?;
    train_linear_teacher(&train.x.view(), &train.y.view(), lambda, d_t, seed)
}
