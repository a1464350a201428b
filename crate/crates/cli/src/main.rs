use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

mod args;
mod commands;
mod montage;

use args::Cli;

/// Raised when a verification run completes but a check misses its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{0} verification check(s) failed")]
pub struct VerificationFailed(pub usize);

/// Bad flag combinations that clap cannot express.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<dualglow::Error>() {
            return match e {
                dualglow::Error::Numeric { .. } | dualglow::Error::Singularity(_) | dualglow::Error::Domain { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("DUALGLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("DUALGLOW_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = init_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
