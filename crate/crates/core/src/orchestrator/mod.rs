//! Run assembly: configuration, the coordinator loop, the event log and
//! everything written to a run directory.

pub mod config;
pub mod coordinator;
pub mod events;
pub mod replay;
pub mod report;
mod run;

pub use config::{ConfigError, EngineKind, RunConfig, SearchMode};
pub use coordinator::{
    execute_job, Coordinator, CoordinatorError, Job, JobOutput, Observation, Observer, SearchOutcome,
};
pub use events::{Event, EventLog, EventRecord};
pub use replay::{replay, ReplayError};
pub use report::{emit_report, ReportError, RunManifest, Summary, NO_SOLUTION_MARKER};
pub use run::{build_backends, load_inputs, run, run_search, write_outputs, Backends, RunError};
