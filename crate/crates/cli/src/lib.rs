//! Command implementations behind the `maff` binary.

pub mod commands;
pub mod config;
pub mod selftest;

use maff_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::Undefined(_) => EXIT_NUMERIC,
        Error::Format { .. }
        | Error::MissingPaths(_)
        | Error::Io { .. }
        | Error::EmptySet(_)
        | Error::Dimension(_)
        | Error::Contract(_) => EXIT_DATA,
    }
}
