//! Trace-driven discrete-event simulator for a cluster of LLM serving
//! instances, together with the prediction stack used to manage it.
//!
//! The crate is organised around the flow of a request through the
//! managed cluster:
//!
//! ```text
//!   trace ──> router ──> instances (simcore) ──> metrics
//!               │            │
//!               │            ├── anticipator (per-instance look-ahead map)
//!               │            │
//!   loadpred ───┘       scaler ──── forecast (window-level workload model)
//! ```
//!
//! * [`trace`] loads or synthesises request traces and aggregates them
//!   into fixed-length windows.
//! * [`simcore`] advances the cluster state: continuous batching with
//!   chunked prefill, KV-cache accounting, preemption by recompute,
//!   instance boot/isolate/stop lifecycle.
//! * [`anticipator`] maintains a per-instance projection of KV usage
//!   over upcoming iterations.
//! * [`loadpred`] predicts per-request response lengths (oracle, noisy,
//!   heuristic).
//! * [`forecast`] trains and applies the window-level workload model
//!   and converts predicted token totals into an instance count.
//! * [`scaler`] decides when instances boot or drain.
//! * [`router`] assigns arriving requests to instances.
//! * [`metrics`] turns per-request records into reports.
//! * [`config`] holds the resolved experiment configuration shared by
//!   the library and the command-line front-end.

pub mod anticipator;
pub mod config;
pub mod error;
pub mod forecast;
pub mod loadpred;
pub mod metrics;
pub mod router;
pub mod scaler;
pub mod simcore;
pub mod trace;
pub(crate) mod util;

pub use config::ExperimentConfig;
pub use error::Error;
pub use metrics::MetricsReport;
pub use simcore::{run, SimOutcome};

/// Request identifiers are unique within one simulation.
pub type RequestId = u64;

/// Instance identifiers are assigned in boot order and never reused.
pub type InstanceId = u32;
