//! Hybrid teacher-forcing / free-running training.

mod optim;
mod run;
mod runlog;
mod schedule;
mod step;

pub use optim::{Adam, OptimizerConfig};
pub use run::{train, train_from, TrainOutput, TrainSettings, TrainStatus, DIVERGENCE_PATIENCE};
pub use runlog::{audit_run_log, parse_run_log, read_run_log, write_run_log, Phase, StepRecord};
pub use schedule::{
    build_iteration_input, detect_premature_eos, majority_outcome, t1_for_step, t1_fraction, update_schedule,
    EosOutcome, HybridConfig, ModeFlags, SchedulerState, T1Schedule,
};
pub use step::{build_step_graph, hybrid_step, HybridStepReport, ScheduleRule, StepGraph, StepPlan};
