//! Discrete-event cluster simulator: instances iterate over batches,
//! requests flow queue to prefill to decode, the engine sequences it all.

mod cluster;
mod engine;
mod event;
mod instance;
mod request;

pub use cluster::{Cluster, ClusterSample};
pub use engine::{run, ForecastWindowRecord, OverheadTotals, SimOutcome};
pub use event::{Event, EventKind, EventQueue};
pub use instance::{
    CostModel, Instance, InstanceStatus, IterationEffects, PlanResult, RunningIteration,
};
pub use request::{AbortReason, RequestState, SimRequest};
