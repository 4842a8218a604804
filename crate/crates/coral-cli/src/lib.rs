//! Experiment harness behind the `coral` binary: run configuration,
//! the training runner, correspondence evaluation, correlation analysis,
//! and plot-data export.

pub mod analyze;
pub mod config;
pub mod evalcmd;
pub mod evaluate;
pub mod plots;
pub mod runner;

use coral_core::CoralError;

/// CLI exit codes: 0 success, 1 usage error, 2 data/format error,
/// 3 numerical failure.
pub fn exit_code_for(err: &CoralError) -> i32 {
    match err {
        CoralError::Config(_) | CoralError::OutOfRange(_) => 1,
        CoralError::Format(_) | CoralError::Io(_) | CoralError::DimensionMismatch(_) => 2,
        CoralError::NonFinite(_)
        | CoralError::DegenerateInput(_)
        | CoralError::InvalidDistribution(_)
        | CoralError::EmptyDomain(_) => 3,
    }
}
