//! Experiment configuration: one TOML file with a section per module,
//! every field defaulted, validated as a whole before anything runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::forecast::CapacityProfile;
use crate::loadpred::ErrorProfile;
use crate::router::RouterConfig;
use crate::scaler::{ScalerConfig, ScalerPolicy};
use crate::simcore::CostModel;
use crate::trace::LogNormalLengths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadConfig,
    pub cluster: ClusterConfig,
    pub cost: CostModel,
    pub router: RouterConfig,
    pub scaler: ScalerConfig,
    pub predictor: PredictorConfig,
    pub forecast: ForecastSection,
    pub metrics: MetricsConfig,
    pub sim: SimConfig,
}

/// Arrival generation when no trace file is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub qps: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Trace file to replay instead of generating arrivals.
    pub trace: Option<PathBuf>,
    pub lengths: LengthModelConfig,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            qps: 1.0,
            duration_s: 600.0,
            seed: 0,
            trace: None,
            lengths: LengthModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthModelKind {
    LogNormal,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthModelConfig {
    pub kind: LengthModelKind,
    /// Trace to resample lengths from when `kind = "empirical"`.
    pub source_trace: Option<PathBuf>,
    pub log_normal: LogNormalLengths,
}

impl Default for LengthModelConfig {
    fn default() -> Self {
        LengthModelConfig {
            kind: LengthModelKind::LogNormal,
            source_trace: None,
            log_normal: LogNormalLengths::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub initial_instances: u32,
    pub min_instances: u32,
    pub max_instances: u32,
    pub kv_capacity_tokens: u64,
    pub max_model_len: u32,
    /// Pins the fleet size; requires the scaler to be disabled.
    pub fixed_instances: Option<u32>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            initial_instances: 4,
            min_instances: 1,
            max_instances: 8,
            kv_capacity_tokens: 20_000,
            max_model_len: 4096,
            fixed_instances: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Oracle,
    Noisy,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Explicit noise parameters; calibrated from `profile` when unset.
    pub zero_prob: Option<f64>,
    pub laplace_scale: Option<f64>,
    pub profile: ErrorProfile,
    pub calibration_samples: usize,
    pub heuristic_window: usize,
    pub heuristic_fallback: u32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Noisy,
            zero_prob: None,
            laplace_scale: None,
            profile: ErrorProfile::default(),
            calibration_samples: 100_000,
            heuristic_window: 50,
            heuristic_fallback: 87,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub window_s: f64,
    pub history_len: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub train_seed: u64,
    /// Pre-trained model to drive forecast scalers.
    pub checkpoint: Option<PathBuf>,
    /// Per-instance window token capacity for instance sizing.
    pub capacity: CapacityProfile,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            window_s: 600.0,
            history_len: 12,
            hidden: 32,
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 32,
            grad_clip: 5.0,
            train_seed: 0,
            checkpoint: None,
            capacity: CapacityProfile {
                prefill_tokens: 650_000.0,
                decode_tokens: 180_000.0,
                total_tokens: 700_000.0,
            },
        }
    }
}

impl ForecastSection {
    pub fn forecast_config(&self) -> crate::forecast::ForecastConfig {
        crate::forecast::ForecastConfig {
            history_len: self.history_len,
            train: crate::forecast::TrainConfig {
                hidden: self.hidden,
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                batch_size: self.batch_size,
                grad_clip: self.grad_clip,
                seed: self.train_seed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub slo_s_per_token: f64,
    pub timeline_interval_s: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            slo_s_per_token: 0.2,
            timeline_interval_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Full state validation after every event, not just in debug.
    pub validate: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            validate: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));

        if !(self.workload.qps >= 0.0 && self.workload.qps.is_finite()) {
            return err(format!("workload.qps must be finite and >= 0, got {}", self.workload.qps));
        }
        if !(self.workload.duration_s >= 0.0 && self.workload.duration_s.is_finite()) {
            return err("workload.duration_s must be finite and >= 0".into());
        }
        if self.workload.lengths.kind == LengthModelKind::Empirical
            && self.workload.lengths.source_trace.is_none()
            && self.workload.trace.is_none()
        {
            return err("empirical lengths need workload.lengths.source_trace or workload.trace".into());
        }
        self.workload
            .lengths
            .log_normal
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("workload.lengths.log_normal: {e}")))?;

        let c = &self.cluster;
        if c.min_instances == 0 || c.min_instances > c.max_instances {
            return err(format!(
                "cluster instance bounds invalid: min {} max {}",
                c.min_instances, c.max_instances
            ));
        }
        if c.initial_instances < c.min_instances || c.initial_instances > c.max_instances {
            return err(format!(
                "cluster.initial_instances {} outside [{}, {}]",
                c.initial_instances, c.min_instances, c.max_instances
            ));
        }
        if c.kv_capacity_tokens == 0 {
            return err("cluster.kv_capacity_tokens must be positive".into());
        }
        if c.max_model_len == 0 {
            return err("cluster.max_model_len must be positive".into());
        }
        if let Some(fixed) = c.fixed_instances {
            if self.scaler.policy != ScalerPolicy::None {
                return err(
                    "cluster.fixed_instances conflicts with an enabled scaler; set scaler.policy = \"none\""
                        .into(),
                );
            }
            if fixed == 0 || fixed > c.max_instances {
                return err(format!(
                    "cluster.fixed_instances {} outside [1, {}]",
                    fixed, c.max_instances
                ));
            }
        }

        let cost = &self.cost;
        for (name, v) in [
            ("base_iteration_s", cost.base_iteration_s),
            ("per_prefill_token_s", cost.per_prefill_token_s),
            ("per_decode_token_s", cost.per_decode_token_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("cost.{name} must be finite and >= 0, got {v}"));
            }
        }
        if cost.max_prefill_chunk == 0 {
            return err("cost.max_prefill_chunk must be positive".into());
        }
        if !(cost.cold_start_s > 0.0 && cost.cold_start_s.is_finite()) {
            return err("cost.cold_start_s must be positive".into());
        }

        let r = &self.router;
        if r.queue_capacity == 0 {
            return err("router.queue_capacity must be positive".into());
        }
        if !(r.memory_penalty >= 0.0 && r.memory_penalty.is_finite()) {
            return err("router.memory_penalty must be finite and >= 0".into());
        }
        if !(r.memory_threshold > 0.0 && r.memory_threshold <= 1.0) {
            return err("router.memory_threshold must lie in (0, 1]".into());
        }
        if r.lookahead == 0 {
            return err("router.lookahead must be positive".into());
        }
        for (name, v) in [
            ("overload_usage_threshold", r.overload_usage_threshold),
            ("overload_iteration_fraction", r.overload_iteration_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("router.{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(r.busy_window_s > 0.0) {
            return err("router.busy_window_s must be positive".into());
        }

        let s = &self.scaler;
        if !(s.tick_interval_s > 0.0 && s.tick_interval_s.is_finite()) {
            return err("scaler.tick_interval_s must be positive".into());
        }
        if s.lookahead == 0 {
            return err("scaler.lookahead must be positive".into());
        }
        for (name, v) in [
            ("overload_usage_threshold", s.overload_usage_threshold),
            ("overload_iteration_fraction", s.overload_iteration_fraction),
            ("scale_down_threshold", s.scale_down_threshold),
            ("up_watermark", s.up_watermark),
            ("down_watermark", s.down_watermark),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("scaler.{name} must lie in (0, 1), got {v}"));
            }
        }
        if s.down_watermark >= s.up_watermark {
            return err("scaler.down_watermark must be below scaler.up_watermark".into());
        }

        let p = &self.predictor;
        match (p.zero_prob, p.laplace_scale) {
            (None, None) => {}
            (Some(z), Some(b)) => {
                if !(0.0..=1.0).contains(&z) {
                    return err(format!("predictor.zero_prob must lie in [0, 1], got {z}"));
                }
                if !(b >= 0.0 && b.is_finite()) {
                    return err("predictor.laplace_scale must be finite and >= 0".into());
                }
            }
            _ => {
                return err(
                    "predictor.zero_prob and predictor.laplace_scale must be set together".into(),
                )
            }
        }
        p.profile
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("predictor.profile: {e}")))?;
        if p.calibration_samples == 0 {
            return err("predictor.calibration_samples must be positive".into());
        }
        if p.heuristic_window == 0 {
            return err("predictor.heuristic_window must be positive".into());
        }
        if p.heuristic_fallback == 0 {
            return err("predictor.heuristic_fallback must be positive".into());
        }

        let f = &self.forecast;
        if !(f.window_s > 0.0 && f.window_s.is_finite()) {
            return err("forecast.window_s must be positive".into());
        }
        if f.history_len == 0 {
            return err("forecast.history_len must be positive".into());
        }
        if f.hidden == 0 {
            return err("forecast.hidden must be positive".into());
        }
        if f.batch_size == 0 {
            return err("forecast.batch_size must be positive".into());
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return err("forecast.learning_rate must be positive".into());
        }
        f.capacity
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("forecast.capacity: {e}")))?;

        if !(self.metrics.slo_s_per_token > 0.0) {
            return err("metrics.slo_s_per_token must be positive".into());
        }
        if !(self.metrics.timeline_interval_s > 0.0) {
            return err("metrics.timeline_interval_s must be positive".into());
        }
        Ok(())
    }

    /// Effective fleet bounds after applying any fixed-instance pin.
    pub fn effective_cluster(&self) -> (u32, u32, u32) {
        match self.cluster.fixed_instances {
            Some(n) => (n, n, n),
            None => (
                self.cluster.initial_instances,
                self.cluster.min_instances,
                self.cluster.max_instances,
            ),
        }
    }
}
