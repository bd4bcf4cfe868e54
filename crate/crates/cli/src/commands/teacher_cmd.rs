//! `train-teacher`: fit or materialize a teacher and dump one TDT1 artifact
//! per split.

use clap::Args;
use std::path::PathBuf;

use tsdistill_core::dataio::Split;
use tsdistill_core::eval::mse;
use tsdistill_core::teacher::{write_teacher_artifact, ArtifactHeader, MaterializedTeacher};
use tsdistill_core::{Error, Real, Result};

use crate::config::{load_prepared, ConfigOverrides, DirLock, RunConfig};
use crate::commands::teacher_source::{artifact_path, fit_linear, TeacherSpec};

#[derive(Debug, Args)]
pub struct TeacherArgs {
    /// Output directory holding the prepared dataset
    #[arg(long)]
    pub out: PathBuf,
    /// Teacher source: `linear[:lambda=X]` or `oracle[:sigma=X]`
    #[arg(long)]
    pub teacher: String,
    /// Teacher feature dimension D_t [default: 64]
    #[arg(long, default_value_t = 64)]
    pub d_t: usize,
    /// Seed for teacher noise/projection streams [default: 1234]
    #[arg(long, default_value_t = 1234)]
    pub teacher_seed: u64,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(args: &TeacherArgs) -> Result<()> {
    let spec = TeacherSpec::parse(&args.teacher)?;
    if spec == TeacherSpec::Artifact {
        return Err(Error::InvalidArgument(
            "train-teacher produces artifacts; pass `linear` or `oracle`".into(),
        ));
    }
    let _lock = DirLock::acquire(&args.out)?;
    let (ds, manifest) = load_prepared(&args.out)?;
    let cfg = RunConfig::resolve(&args.overrides, Some((manifest.lookback, manifest.horizon)))?;
    let (t, s) = (cfg.lookback, cfg.horizon);
    let c = ds.num_channels();

    // materialize outputs for every split
    let bank: MaterializedTeacher<Real> = match &spec {
        TeacherSpec::Oracle { sigma } => MaterializedTeacher::from_oracle(
            &ds,
            &Split::ALL,
            t,
            s,
            *sigma,
            args.d_t,
            args.teacher_seed,
        )?,
        TeacherSpec::Linear { lambda } => {
            let teacher = fit_linear(&ds, t, s, *lambda, args.d_t, args.teacher_seed)?;
            let mut bank = MaterializedTeacher::new(args.d_t);
            for split in Split::ALL {
                let n = ds.window_count(split, t, s)?;
                let all: Vec<usize> = (0..n).collect();
                let windows = ds.gather_windows(split, t, s, &all)?;
                bank.insert(split, teacher.predict(&windows.x.view()))?;
            }
            bank
        }
        TeacherSpec::Artifact => unreachable!(),
    };

    for split in Split::ALL {
        let outputs = bank.split(split).expect("materialized above");
        let header = ArtifactHeader::new(split, t, s, c, args.d_t, outputs.len());
        let path = artifact_path(&args.out, split);
        write_teacher_artifact(&path, &header, outputs)?;
        println!("wrote {} ({} windows)", path.display(), outputs.len());
    }

    // report test error against the last-value persistence baseline
    let n_test = ds.window_count(Split::Test, t, s)?;
    let all: Vec<usize> = (0..n_test).collect();
    let test = ds.gather_windows(Split::Test, t, s, &all)?;
    let teacher_mse = mse(&bank.split(Split::Test).unwrap().y_hat.view(), &test.y.view())?;
    let mut persist = test.y.clone();
    for b in 0..n_test {
        for ch in 0..c {
            let last = test.x[(b, t - 1, ch)];
            for si in 0..s {
                persist[(b, si, ch)] = last;
            }
        }
    }
    let persist_mse = mse(&persist.view(), &test.y.view())?;
    println!("teacher test mse {teacher_mse:.6} (persistence baseline {persist_mse:.6})");
    Ok(())
}
