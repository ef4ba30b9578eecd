//! `bhg`: build, train, evaluate, benchmark and export binarized hourglass
//! networks.

mod args;
mod commands;

use std::process::ExitCode;

use bhg::Error;
use clap::Parser;

use crate::args::Cli;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) | Error::Block(_) | Error::Network(_) => exit::USAGE,
        Error::Data { .. } | Error::Image { .. } | Error::Format(_) | Error::Checksum | Error::Io(_) | Error::Json(_) => {
            exit::DATA
        }
        Error::Numerical { .. } => exit::NUMERICAL,
        _ => exit::FAILURE,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("BHG_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Invalid(format!("BHG_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(Error::Invalid("BHG_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_default_env()
        .init();
    let result = init_threads().and_then(|_| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
