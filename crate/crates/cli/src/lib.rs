//! Experiment harness: correlation metrics, oracle checks, leave-one-out
//! sweeps over agent families, and report emission.

pub mod oracle_check;
pub mod report;
pub mod stats;
pub mod sweep;

pub use report::{AgentRow, Correlation, Failure, RunReport};
pub use sweep::{run_sweep, Method, SweepConfig, SweepOutput, TruthMode};
