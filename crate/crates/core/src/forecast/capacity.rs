//! Per-instance serving capacity measured from simulation output.
//!
//! Capacity is the highest token throughput any single instance
//! sustained during a window in which it met the latency target. Those
//! rates feed the instance-count sizing: a window forecast divided by
//! per-instance capacity gives the number of instances to provision.

use serde::{Deserialize, Serialize};

use crate::error::ForecastError;
use crate::util::ceil_tol;

/// Tokens one instance can serve per window without violating latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityProfile {
    pub prefill_tokens: f64,
    pub decode_tokens: f64,
    pub total_tokens: f64,
}

impl CapacityProfile {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let fields = [
            ("prefill", self.prefill_tokens),
            ("decode", self.decode_tokens),
            ("total", self.total_tokens),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(ForecastError::Calibration(format!(
                    "capacity {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.total_tokens > self.prefill_tokens + self.decode_tokens {
            return Err(ForecastError::Calibration(
                "total capacity cannot exceed prefill + decode capacity".into(),
            ));
        }
        Ok(())
    }
}

/// What one instance served during one window, and whether it stayed
/// within the latency target the whole time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceWindowStats {
    pub instance_id: u32,
    pub window_index: u64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub latency_violation: bool,
}

/// Maximum observed per-window token rates over violation-free windows.
pub fn profile_capacity(
    stats: &[InstanceWindowStats],
) -> Result<CapacityProfile, ForecastError> {
    let mut best_prefill = 0u64;
    let mut best_decode = 0u64;
    let mut best_total = 0u64;
    let mut any_clean = false;
    for s in stats {
        if s.latency_violation {
            continue;
        }
        any_clean = true;
        best_prefill = best_prefill.max(s.prefill_tokens);
        best_decode = best_decode.max(s.decode_tokens);
        best_total = best_total.max(s.prefill_tokens + s.decode_tokens);
    }
    if !any_clean {
        return Err(ForecastError::NoViolationFreeWindow);
    }
    let profile = CapacityProfile {
        prefill_tokens: best_prefill as f64,
        decode_tokens: best_decode as f64,
        total_tokens: best_total as f64,
    };
    profile.validate()?;
    Ok(profile)
}

/// Instances needed to serve the forecast window load: the binding
/// constraint among prefill, decode, and combined token budgets.
pub fn required_instances(
    prefill_forecast: f64,
    decode_forecast: f64,
    profile: &CapacityProfile,
) -> u32 {
    let p = prefill_forecast.max(0.0);
    let d = decode_forecast.max(0.0);
    let need = (p / profile.prefill_tokens)
        .max(d / profile.decode_tokens)
        .max((p + d) / profile.total_tokens);
    ceil_tol(need).max(1.0) as u32
}
