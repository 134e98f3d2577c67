//! Error types shared across the crate.
//!
//! Configuration problems are kept separate from runtime failures so the
//! command-line front-end can map them to distinct exit codes.

use thiserror::Error;

/// Top-level error for library entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Forecast(#[from] ForecastError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error stems from user-supplied configuration rather
    /// than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

/// Failures while loading, generating, or aggregating traces.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("trace csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("trace parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid trace record at line {line}: {message}")]
    Invalid { line: u64, message: String },

    #[error("invalid generator parameters: {0}")]
    Params(String),
}

/// Rejected experiment configurations. Raised before any simulation work
/// starts; a partially validated run is never executed.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Failures while fitting the synthetic length-error model.
#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid error profile: {0}")]
    InvalidProfile(String),

    #[error("calibration could not match the profile within tolerance: {0}")]
    Unattainable(String),
}

/// Failures in the workload model and capability profiling.
#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("insufficient history: need at least {needed} windows, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error(
        "no violation-free window found; run a calibration trace at low load \
         so at least one window completes without SLO violations"
    )]
    NoViolationFreeWindow,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("noise calibration failed: {0}")]
    Calibration(String),
}

/// Bad inputs to metric computations.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid metrics input: {0}")]
    InvalidInput(String),
}

/// Runtime failures inside the simulator proper. Most operational events
/// (aborts, denied scale-ups) are recorded in the outcome instead of
/// raised; these variants indicate a broken invariant or unusable input.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation state error: {0}")]
    State(String),

    #[error("event log write failed: {0}")]
    EventLog(#[from] std::io::Error),
}
