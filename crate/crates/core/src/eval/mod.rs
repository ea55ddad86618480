//! Macro-F1, the experiment harness and report emission.

mod harness;
mod metrics;
mod report;

pub use harness::{run_missing_scenarios, sweep_labels, sweep_mask, EvalSetup};
pub use metrics::{macro_f1, F1Scores};
pub use report::{emit_report, mean_std, Aggregate, Condition, EvalReport, ReportRow};
