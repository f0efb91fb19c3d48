//! Client agents, the multi-party simulation driver and scenario files.
//!
//! [`run_simulation`] runs a coordinator and one [`ClientAgent`] per party
//! in a single thread. Agents are stepped round-robin and talk to the
//! server through [`Loopback`], which pushes every message through the wire
//! encoding. Time is a [`ManualClock`](crate::orchestrator::ManualClock)
//! that only advances by a full deadline when no agent can make progress,
//! so runs are deterministic. [`run_server`] and [`run_client`] run the
//! same state machines over TCP.

mod client;
mod scenario;
mod sim;

pub use client::{local_train, CapturedSubmit, ClientAgent, ClientError, ClientEvent, ClientPhase, ClientState, LocalResult, Loopback, Step};
pub use scenario::{EvalConfig, FusionWeights, PartyConfig, ProbeConfig, ScenarioConfig, ShapleyConfig, SEED_ENV};
pub use sim::{run_client, run_server, run_simulation, write_artifacts, ClientReport, Simulation, SimulationOutcome};

use crate::contribution::ContributionError;
use crate::dataquality::QualityLoopError;
use crate::metrics::MetricError;
use crate::orchestrator::OrchestratorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] OrchestratorError),
    #[error("quality loop: {0}")]
    Quality(String),
    #[error(transparent)]
    Contribution(#[from] ContributionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation stalled: {0}")]
    Stalled(String),
}

impl From<QualityLoopError> for HarnessError {
    fn from(e: QualityLoopError) -> Self {
        HarnessError::Quality(e.to_string())
    }
}
