//! Request traces: loading from CSV, synthetic generation, and window
//! aggregation.
//!
//! A trace is a list of [`TraceRecord`]s sorted by arrival time. Both
//! generators are pure functions of their parameters and seed, so a
//! (config, seed) pair always reproduces the same trace.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::RequestId;

/// Seconds per synthetic day.
pub const DAY_SECONDS: f64 = 86_400.0;

/// One request in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: RequestId,
    /// Seconds from trace start; non-decreasing within a stored trace.
    pub arrival_time: f64,
    pub prompt_tokens: u32,
    /// Ground-truth response length, available to the harness only.
    pub response_tokens: u32,
}

/// Token totals for one fixed-length window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAggregate {
    pub index: usize,
    /// Prompt tokens of requests arriving in the window.
    pub prompt_tokens: u64,
    /// Ground-truth response tokens of requests arriving in the window.
    pub decode_tokens: u64,
}

/// Per-request length distribution used by the generators.
#[derive(Debug, Clone)]
pub enum LengthSource {
    /// Resample (prompt, response) pairs uniformly from a recorded trace.
    Empirical(Vec<(u32, u32)>),
    /// Independent log-normal prompt and response lengths.
    LogNormal(LogNormalLengths),
}

/// Log-normal length parameters. Medians and sigmas are in token space;
/// samples are rounded and clamped to [1, max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogNormalLengths {
    pub median_prompt: f64,
    pub sigma_prompt: f64,
    pub median_response: f64,
    pub sigma_response: f64,
    pub max_prompt: u32,
    pub max_response: u32,
}

impl LogNormalLengths {
    pub fn validate(&self) -> Result<(), TraceError> {
        for (name, v) in [
            ("median_prompt", self.median_prompt),
            ("median_response", self.median_response),
        ] {
            if !v.is_finite() || v < 1.0 {
                return Err(TraceError::Params(format!("{name} must be >= 1, got {v}")));
            }
        }
        for (name, v) in [
            ("sigma_prompt", self.sigma_prompt),
            ("sigma_response", self.sigma_response),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TraceError::Params(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.max_prompt == 0 || self.max_response == 0 {
            return Err(TraceError::Params("length caps must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for LogNormalLengths {
    fn default() -> Self {
        // Defaults shaped like public chat traces: median prompt 52,
        // median response 87, long right tails.
        LogNormalLengths {
            median_prompt: 52.0,
            sigma_prompt: 1.2,
            median_response: 87.0,
            sigma_response: 1.1,
            max_prompt: 4096,
            max_response: 4096,
        }
    }
}

impl LengthSource {
    pub fn draw(&self, rng: &mut ChaCha12Rng) -> (u32, u32) {
        match self {
            LengthSource::Empirical(pairs) => {
                debug_assert!(!pairs.is_empty());
                pairs[rng.gen_range(0..pairs.len())]
            }
            LengthSource::LogNormal(p) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let zp: f64 = normal.sample(rng);
                let zd: f64 = normal.sample(rng);
                let prompt = (p.median_prompt * (p.sigma_prompt * zp).exp()).round();
                let resp = (p.median_response * (p.sigma_response * zd).exp()).round();
                (
                    (prompt.max(1.0) as u32).min(p.max_prompt.max(1)),
                    (resp.max(1.0) as u32).min(p.max_response.max(1)),
                )
            }
        }
    }

    /// Mean of prompt + response tokens per request. Exact for empirical
    /// sources; estimated from a fixed-seed sample for log-normal ones so
    /// the result is deterministic.
    pub fn mean_total_tokens(&self, seed: u64) -> f64 {
        match self {
            LengthSource::Empirical(pairs) => {
                debug_assert!(!pairs.is_empty());
                let sum: u64 = pairs.iter().map(|&(p, d)| p as u64 + d as u64).sum();
                sum as f64 / pairs.len() as f64
            }
            LengthSource::LogNormal(_) => {
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6d65_616e);
                let n = 8192;
                let mut sum = 0u64;
                for _ in 0..n {
                    let (p, d) = self.draw(&mut rng);
                    sum += p as u64 + d as u64;
                }
                sum as f64 / n as f64
            }
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        match self {
            LengthSource::Empirical(pairs) => {
                if pairs.is_empty() {
                    return Err(TraceError::Params(
                        "empirical length source needs at least one pair".into(),
                    ));
                }
                if pairs.iter().any(|&(p, d)| p == 0 || d == 0) {
                    return Err(TraceError::Params(
                        "empirical length pairs must be at least one token".into(),
                    ));
                }
            }
            LengthSource::LogNormal(p) => p.validate()?,
        }
        Ok(())
    }
}

/// Loads a CSV trace. Columns are `arrival_time, prompt_tokens,
/// response_tokens[, request_id]`; a header row is detected and skipped.
/// Records are sorted by arrival time (stable) and, when the file carries
/// no id column, numbered in arrival order.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;

    let mut records: Vec<(f64, u32, u32, Option<u64>)> = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| TraceError::Parse {
            line: row_idx as u64 + 1,
            message: e.to_string(),
        })?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or(row_idx as u64 + 1);
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        match parse_row(&row) {
            Ok(parsed) => records.push(parsed),
            Err(message) => {
                // The first row may be a header; anything later must parse.
                if row_idx == 0 && looks_like_header(&row) {
                    continue;
                }
                return Err(TraceError::Parse { line, message });
            }
        }
        let (arrival, prompt, resp, _) = *records.last().unwrap();
        if !arrival.is_finite() || arrival < 0.0 {
            return Err(TraceError::Invalid {
                line,
                message: format!("arrival_time must be finite and >= 0, got {arrival}"),
            });
        }
        if prompt == 0 || resp == 0 {
            return Err(TraceError::Invalid {
                line,
                message: "prompt_tokens and response_tokens must be at least 1".into(),
            });
        }
    }

    let has_ids = records.iter().all(|r| r.3.is_some()) && !records.is_empty();
    records.sort_by(|a, b| a.0.total_cmp(&b.0));
    let out = records
        .into_iter()
        .enumerate()
        .map(|(i, (arrival, prompt, resp, id))| TraceRecord {
            request_id: if has_ids { id.unwrap() } else { i as u64 },
            arrival_time: arrival,
            prompt_tokens: prompt,
            response_tokens: resp,
        })
        .collect();
    Ok(out)
}

fn parse_row(row: &csv::StringRecord) -> Result<(f64, u32, u32, Option<u64>), String> {
    if row.len() != 3 && row.len() != 4 {
        return Err(format!("expected 3 or 4 columns, got {}", row.len()));
    }
    let arrival: f64 = row[0]
        .parse()
        .map_err(|_| format!("bad arrival_time {:?}", &row[0]))?;
    let prompt: u32 = row[1]
        .parse()
        .map_err(|_| format!("bad prompt_tokens {:?}", &row[1]))?;
    let resp: u32 = row[2]
        .parse()
        .map_err(|_| format!("bad response_tokens {:?}", &row[2]))?;
    let id = if row.len() == 4 {
        Some(
            row[3]
                .parse()
                .map_err(|_| format!("bad request_id {:?}", &row[3]))?,
        )
    } else {
        None
    };
    Ok((arrival, prompt, resp, id))
}

fn looks_like_header(row: &csv::StringRecord) -> bool {
    row.iter().any(|f| f.parse::<f64>().is_err())
}

/// Writes a trace in the same column order `load_trace` reads.
pub fn save_trace(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["arrival_time", "prompt_tokens", "response_tokens", "request_id"])?;
    for r in records {
        writer.write_record([
            format!("{}", r.arrival_time),
            r.prompt_tokens.to_string(),
            r.response_tokens.to_string(),
            r.request_id.to_string(),
        ])?;
    }
    writer.flush().map_err(TraceError::Io)?;
    Ok(())
}

/// Generates a homogeneous Poisson trace: exponential inter-arrival gaps
/// at `qps`, lengths drawn from `lengths`, until `duration` seconds.
pub fn generate_poisson(
    qps: f64,
    duration: f64,
    lengths: &LengthSource,
    seed: u64,
) -> Result<Vec<TraceRecord>, TraceError> {
    if !qps.is_finite() || qps < 0.0 {
        return Err(TraceError::Params(format!("qps must be >= 0, got {qps}")));
    }
    if !duration.is_finite() || duration < 0.0 {
        return Err(TraceError::Params(format!(
            "duration must be >= 0, got {duration}"
        )));
    }
    lengths.validate()?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    if qps == 0.0 || duration == 0.0 {
        return Ok(records);
    }
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen::<f64>();
        t += -(1.0 - u).ln() / qps;
        if t >= duration {
            break;
        }
        let (prompt, resp) = lengths.draw(&mut rng);
        records.push(TraceRecord {
            request_id: records.len() as u64,
            arrival_time: t,
            prompt_tokens: prompt,
            response_tokens: resp,
        });
    }
    Ok(records)
}

/// Parameters for the diurnal generator. Arrival intensity tracks a
/// repeating day profile expressed in tokens per second.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicSpec {
    /// Relative intensity per hour-of-day slot; typically 24 entries.
    pub day_profile: Vec<f64>,
    /// Tokens per second at profile value 1.0.
    pub base_tps: f64,
    pub days: u32,
    /// Each day's intensity is scaled by an independent factor drawn
    /// uniformly from [1 - peak_jitter, 1 + peak_jitter].
    pub peak_jitter: f64,
    /// Std-dev of an extra multiplicative noise factor applied per
    /// `noise_interval_s` stretch; 0 disables it.
    pub rate_noise: f64,
    pub noise_interval_s: f64,
}

impl Default for PeriodicSpec {
    fn default() -> Self {
        PeriodicSpec {
            day_profile: vec![1.0; 24],
            base_tps: 100.0,
            days: 1,
            peak_jitter: 0.0,
            rate_noise: 0.0,
            noise_interval_s: 600.0,
        }
    }
}

impl PeriodicSpec {
    fn validate(&self) -> Result<(), TraceError> {
        if self.day_profile.is_empty() {
            return Err(TraceError::Params("day_profile must not be empty".into()));
        }
        if self.day_profile.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(TraceError::Params(
                "day_profile entries must be finite and > 0".into(),
            ));
        }
        if !self.base_tps.is_finite() || self.base_tps <= 0.0 {
            return Err(TraceError::Params(format!(
                "base_tps must be > 0, got {}",
                self.base_tps
            )));
        }
        if self.days == 0 {
            return Err(TraceError::Params("days must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.peak_jitter) {
            return Err(TraceError::Params(format!(
                "peak_jitter must be in [0, 1), got {}",
                self.peak_jitter
            )));
        }
        if !self.rate_noise.is_finite() || self.rate_noise < 0.0 {
            return Err(TraceError::Params(format!(
                "rate_noise must be >= 0, got {}",
                self.rate_noise
            )));
        }
        if !self.noise_interval_s.is_finite() || self.noise_interval_s <= 0.0 {
            return Err(TraceError::Params(format!(
                "noise_interval_s must be > 0, got {}",
                self.noise_interval_s
            )));
        }
        Ok(())
    }
}

/// Generates a diurnal trace by thinning a Poisson stream against the
/// day profile. Request rate is `tps(t) / mean tokens per request`.
pub fn generate_periodic(
    spec: &PeriodicSpec,
    lengths: &LengthSource,
    seed: u64,
) -> Result<Vec<TraceRecord>, TraceError> {
    spec.validate()?;
    lengths.validate()?;

    let duration = spec.days as f64 * DAY_SECONDS;
    let mean_tokens = lengths.mean_total_tokens(seed);
    let slot_len = DAY_SECONDS / spec.day_profile.len() as f64;

    // Draw per-day and per-interval factors up front so the thinning
    // stream is independent of how often they are consulted.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let day_factors: Vec<f64> = (0..spec.days)
        .map(|_| {
            if spec.peak_jitter == 0.0 {
                1.0
            } else {
                rng.gen_range(1.0 - spec.peak_jitter..=1.0 + spec.peak_jitter)
            }
        })
        .collect();
    let noise_intervals = (duration / spec.noise_interval_s).ceil() as usize;
    let noise_factors: Vec<f64> = if spec.rate_noise == 0.0 {
        vec![1.0; noise_intervals.max(1)]
    } else {
        let normal = Normal::new(1.0, spec.rate_noise).expect("noise distribution");
        (0..noise_intervals.max(1))
            .map(|_| normal.sample(&mut rng).clamp(0.1, 1.0 + 4.0 * spec.rate_noise))
            .collect()
    };

    let max_profile = spec
        .day_profile
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let max_noise = noise_factors.iter().cloned().fold(f64::MIN, f64::max);
    let lambda_max =
        spec.base_tps * max_profile * (1.0 + spec.peak_jitter) * max_noise / mean_tokens;

    let rate_at = |t: f64| -> f64 {
        let day = ((t / DAY_SECONDS) as usize).min(spec.days as usize - 1);
        let slot = (((t % DAY_SECONDS) / slot_len) as usize).min(spec.day_profile.len() - 1);
        let noise_idx = ((t / spec.noise_interval_s) as usize).min(noise_factors.len() - 1);
        spec.base_tps * spec.day_profile[slot] * day_factors[day] * noise_factors[noise_idx]
            / mean_tokens
    };

    let mut records = Vec::new();
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen::<f64>();
        t += -(1.0 - u).ln() / lambda_max;
        if t >= duration {
            break;
        }
        let accept: f64 = rng.gen::<f64>();
        if accept * lambda_max <= rate_at(t) {
            let (prompt, resp) = lengths.draw(&mut rng);
            records.push(TraceRecord {
                request_id: records.len() as u64,
                arrival_time: t,
                prompt_tokens: prompt,
                response_tokens: resp,
            });
        }
    }
    Ok(records)
}

/// Sums prompt and response tokens per window of `window_s` seconds.
/// Window `i` covers `[i*window_s, (i+1)*window_s)`. Windows are emitted
/// contiguously from 0 through the last populated one, including empty
/// windows in between.
pub fn aggregate_windows(
    records: &[TraceRecord],
    window_s: f64,
) -> Result<Vec<WindowAggregate>, TraceError> {
    if !window_s.is_finite() || window_s <= 0.0 {
        return Err(TraceError::Params(format!(
            "window length must be > 0, got {window_s}"
        )));
    }
    let mut windows: Vec<WindowAggregate> = Vec::new();
    for r in records {
        let idx = (r.arrival_time / window_s).floor() as usize;
        while windows.len() <= idx {
            windows.push(WindowAggregate {
                index: windows.len(),
                prompt_tokens: 0,
                decode_tokens: 0,
            });
        }
        windows[idx].prompt_tokens += r.prompt_tokens as u64;
        windows[idx].decode_tokens += r.response_tokens as u64;
    }
    Ok(windows)
}
