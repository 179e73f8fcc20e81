//! End-to-end adaptation pipeline: run configuration, SGD, the training
//! and evaluation phases, gradient verification, and report rendering.

mod config;
mod gradcheck;
mod optim;
mod phases;
mod report;

pub use config::RunConfig;
pub use gradcheck::{run_gradcheck, GradcheckReport, GroupCheck};
pub use optim::Sgd;
pub use phases::{
    draw_support, evaluate, run_intermediate_phase, run_pipeline, run_source_phase, run_trial,
    AdaptOutcome, PipelineOutput, ScheduleEpoch, SupportSet, TrialEval, TrialOutput,
};
pub use report::{
    aggregate, aggregate_trials, render_report, render_schedule, render_timings, Moments,
    RunReport,
};
