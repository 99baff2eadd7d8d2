//! End-to-end gateway audits: configuration, orchestration and reports.

pub mod commands;
pub mod config;
pub mod connect;
pub mod report;

pub use commands::{
    cmd_audit, cmd_bill, cmd_collect, cmd_converse, cmd_latency, cmd_report, cmd_train,
};
pub use config::{FlagThresholds, GatewaySpec, Overrides, RunConfig};
pub use report::{AuditReport, Flag, Rule};

/// Process exit status for a finished command.
pub fn exit_code(flags_fired: bool) -> i32 {
    if flags_fired {
        1
    } else {
        0
    }
}

/// Exit status for configuration, I/O and gateway failures.
pub const EXIT_FAILURE: i32 = 2;
