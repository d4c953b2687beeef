//! Configuration, local cluster orchestration, and threshold sweeps.

mod config;
mod orchestrate;

pub use config::{parse_config, ConfigArgs, RunConfig, TransportKind};
pub use orchestrate::{
    run, run_detailed, run_worker_process, sweep, sweep_paths, RunOutcome, RunSummary, SweepRow,
    DEFAULT_THRESHOLDS,
};
