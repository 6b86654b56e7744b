//! Scenarios, workload drivers, baselines and metrics.

mod metrics;
mod run;
mod scenario;
mod workload;
mod world;

#[cfg(test)]
mod tests;

pub use metrics::{csv_string, mean_at, write_csv, write_reports, MetricsReport, CSV_HEADER};
pub use run::{base_rtt_s, derived_seed, host_diameter, ring_overlay_bound, run, run_detailed, sweep, RunOutput};
pub use scenario::{CcOverrides, Distribution, GroupSpec, Scenario, TopologySpec, Transport, Workload};
pub use workload::{Payloads, Phase, PlanDriver, ReplicationDriver, RingDriver, Route, Transfer, WaitReady};
pub use world::{Driver, Event, GroupHandle, LoggedSwitchEvent, SimConfig, World, WorldStats};

use thiserror::Error;

use crate::host::HostError;
use crate::switch::SwitchError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("deadlock at t={t} s: {reason}")]
    Deadlock { t: f64, reason: String },
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error("output: {0}")]
    Output(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ScenarioInvalid(_) => 2,
            HarnessError::Deadlock { .. } => 3,
            _ => 1,
        }
    }
}
