//! Command-line front end: dataset generation, pretraining, fine-tuning,
//! baselines, full experiment sweeps and reports.

pub mod commands;
pub mod config;
pub mod files;
pub mod protocol;
pub mod report;
pub mod svg;

use viewcon::Error;

/// Stable process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Shape(_) => EXIT_ARGUMENT,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Data(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}
