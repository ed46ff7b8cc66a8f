//! L-BFGS minimization and the restart driver.

pub mod lbfgs;
pub mod restarts;

pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, StepKind, StepRecord, StopReason};
pub use restarts::{run_restarts, OptimRun, RestartConfig, RestartProblem, RestartSummary};
