//! Command-line driver for the time-series distillation toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 contract
//! violation (failed gradient check or theorem margin).

mod commands;
mod config;

use clap::Parser;
use std::process::ExitCode;

use commands::{analyze, checks, distill, evaluate, prepare, teacher_cmd};
use tsdistill_core::Error;

#[derive(Parser)]
#[command(
    name = "tsdistill",
    version,
    about = "Train and analyze a lightweight forecaster distilled from a frozen teacher \
             via multi-scale and multi-period matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Load or synthesize a dataset, split, standardize, and cache it
    Prepare(prepare::PrepareArgs),
    /// Fit or materialize a teacher and write TDT1 artifacts per split
    TrainTeacher(teacher_cmd::TeacherArgs),
    /// Train the student against a frozen teacher
    Distill(distill::DistillArgs),
    /// Evaluate a checkpoint on one split
    Eval(evaluate::EvalArgs),
    /// Win-ratio/win-keep statistics and diagnostic CSV exports
    Analyze(analyze::AnalyzeArgs),
    /// Check analytic gradients of the full objective against finite differences
    Gradcheck(checks::GradcheckArgs),
    /// Verify the mixup-bound inequality margins on randomized suites
    VerifyTheorems(checks::TheoremArgs),
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CONTRACT: u8 = 3;

fn error_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version arrive here as "errors" with successful status
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let outcome: Result<bool, Error> = match &cli.command {
        Command::Prepare(args) => prepare::run(args).map(|_| true),
        Command::TrainTeacher(args) => teacher_cmd::run(args).map(|_| true),
        Command::Distill(args) => distill::run(args).map(|_| true),
        Command::Eval(args) => evaluate::run(args).map(|_| true),
        Command::Analyze(args) => analyze::run(args).map(|_| true),
        Command::Gradcheck(args) => checks::run_gradcheck(args),
        Command::VerifyTheorems(args) => checks::run_theorems(args),
    };

    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CONTRACT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
