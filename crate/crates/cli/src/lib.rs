//! Library side of the `gram` command: run configuration and subcommands.

pub mod commands;
pub mod config;

use gram_core::GramError;

/// Process exit code for an error: 2 configuration or usage, 3 data, I/O
/// or checkpoint, 4 numeric failure.
pub fn exit_code(err: &GramError) -> i32 {
    match err {
        GramError::Config(_) | GramError::Usage(_) => 2,
        GramError::Data(_) | GramError::Checkpoint(_) | GramError::Io(_) => 3,
        GramError::Numeric(_) => 4,
    }
}
