//! Service-quality and accuracy metrics over a finished run, plus the
//! report files the command-line front-end writes.
//!
//! The JSON report contains only simulated quantities, so a (config,
//! seed) pair reproduces it byte for byte. Wall-clock management
//! overhead goes to a separate file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, MetricsError};
use crate::simcore::{AbortReason, RequestState, SimOutcome, SimRequest};

/// One completed or aborted request, flattened for CSV export. Latency
/// fields stay unset on aborted rows.
#[derive(Debug, Clone, Serialize)]
pub struct RequestRow {
    pub request_id: u64,
    pub arrival: f64,
    pub prompt_tokens: u32,
    pub response_tokens: u32,
    pub predicted_tokens: u32,
    pub state: RequestState,
    pub abort_reason: Option<AbortReason>,
    pub instance: Option<u32>,
    pub preemptions: u32,
    pub ttft: Option<f64>,
    pub tbt_mean: Option<f64>,
    pub tbt_max: Option<f64>,
    pub e2e: Option<f64>,
    pub normalized_latency: Option<f64>,
    pub within_slo: Option<bool>,
}

impl RequestRow {
    pub fn from_request(req: &SimRequest, slo: f64) -> RequestRow {
        let mut row = RequestRow {
            request_id: req.external_id,
            arrival: req.arrival,
            prompt_tokens: req.prompt_tokens,
            response_tokens: req.response_tokens,
            predicted_tokens: req.predicted_tokens,
            state: req.state,
            abort_reason: req.abort_reason,
            instance: req.instance,
            preemptions: req.preemptions,
            ttft: None,
            tbt_mean: None,
            tbt_max: None,
            e2e: None,
            normalized_latency: None,
            within_slo: None,
        };
        if req.state == RequestState::Completed {
            let completion = req.completion_time.expect("completed without timestamp");
            let first = req.first_token_time.expect("completed without first token");
            let e2e = completion - req.arrival;
            let norm = e2e / req.response_tokens as f64;
            row.ttft = Some(first - req.arrival);
            row.tbt_mean = req.tbt_mean();
            row.tbt_max = req.tbt_max();
            row.e2e = Some(e2e);
            row.normalized_latency = Some(norm);
            row.within_slo = Some(norm <= slo);
        }
        row
    }
}

/// Nearest-rank percentile over unsorted values. P0 is the minimum,
/// P100 the maximum.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    debug_assert!((0.0..=100.0).contains(&p));
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistSummary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

impl DistSummary {
    pub fn over(values: &[f64]) -> Option<DistSummary> {
        if values.is_empty() {
            return None;
        }
        Some(DistSummary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: percentile(values, 50.0).unwrap(),
            p90: percentile(values, 90.0).unwrap(),
            p99: percentile(values, 99.0).unwrap(),
            min: percentile(values, 0.0).unwrap(),
            max: percentile(values, 100.0).unwrap(),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RequestCounts {
    pub total: usize,
    pub completed: usize,
    pub aborted: usize,
    pub aborted_queue_overflow: usize,
    pub aborted_oversize: usize,
    pub preemptions: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SloSummary {
    pub threshold_s_per_token: f64,
    /// Completed-within-SLO over completed; absent with no completions.
    pub attainment: Option<f64>,
    /// Same numerator over completed plus aborted; aborts count against.
    pub attainment_with_aborts: Option<f64>,
}

/// Mean and max absolute percentage error of window forecasts, one
/// summary per token series.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ApeSummary {
    pub mean_ape: f64,
    pub max_ape: f64,
    pub windows: usize,
    pub excluded_zero_actual: usize,
}

/// APE over prediction/actual pairs, skipping zero actuals. Returns
/// `None` when nothing remains to grade.
pub fn forecast_accuracy(predictions: &[f64], actuals: &[f64]) -> Result<Option<ApeSummary>, Error> {
    if predictions.len() != actuals.len() {
        return Err(MetricsError::InvalidInput(format!(
            "forecast accuracy needs matched lists, got {} predictions and {} actuals",
            predictions.len(),
            actuals.len()
        ))
        .into());
    }
    let mut apes = Vec::with_capacity(actuals.len());
    let mut excluded = 0usize;
    for (&p, &a) in predictions.iter().zip(actuals) {
        if a == 0.0 {
            excluded += 1;
            continue;
        }
        apes.push((p - a).abs() / a);
    }
    if apes.is_empty() {
        return Ok(None);
    }
    Ok(Some(ApeSummary {
        mean_ape: apes.iter().sum::<f64>() / apes.len() as f64,
        max_ape: apes.iter().fold(0.0f64, |m, &v| m.max(v)),
        windows: apes.len(),
        excluded_zero_actual: excluded,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthAccuracy {
    pub mae: f64,
    pub acc25: f64,
    pub acc50: f64,
    pub acc100: f64,
    pub count: usize,
}

/// Mean absolute error and within-k fractions of length predictions.
/// The k-token boundary is inclusive.
pub fn length_accuracy(predicted: &[u32], actual: &[u32]) -> Result<LengthAccuracy, Error> {
    if predicted.len() != actual.len() {
        return Err(MetricsError::InvalidInput(format!(
            "length accuracy needs matched lists, got {} predictions and {} actuals",
            predicted.len(),
            actual.len()
        ))
        .into());
    }
    if predicted.is_empty() {
        return Err(MetricsError::InvalidInput("length accuracy over empty lists".into()).into());
    }
    let n = predicted.len() as f64;
    let mut abs_sum = 0.0;
    let (mut a25, mut a50, mut a100) = (0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(actual) {
        let diff = (p as i64 - a as i64).unsigned_abs();
        abs_sum += diff as f64;
        if diff <= 25 {
            a25 += 1;
        }
        if diff <= 50 {
            a50 += 1;
        }
        if diff <= 100 {
            a100 += 1;
        }
    }
    Ok(LengthAccuracy {
        mae: abs_sum / n,
        acc25: a25 as f64 / n,
        acc50: a50 as f64 / n,
        acc100: a100 as f64 / n,
        count: predicted.len(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ForecastReport {
    pub prefill: Option<ApeSummary>,
    pub decode: Option<ApeSummary>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResourceSummary {
    pub instance_seconds: f64,
    /// Instance-seconds over simulated span; absent for an empty run.
    pub mean_instances: Option<f64>,
    pub end_time: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TbtSummary {
    /// Mean of per-request mean gaps.
    pub mean: f64,
    /// Largest gap any request saw.
    pub max: f64,
}

/// The aggregate report. Serialized field order is fixed so identical
/// runs serialize identically.
#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub requests: RequestCounts,
    pub ttft: Option<DistSummary>,
    pub tbt: Option<TbtSummary>,
    pub e2e: Option<DistSummary>,
    pub normalized_latency: Option<DistSummary>,
    pub slo: SloSummary,
    pub forecast: ForecastReport,
    pub length_prediction: Option<LengthAccuracy>,
    pub resource: ResourceSummary,
}

pub fn slo_attainment(rows: &[RequestRow]) -> (Option<f64>, Option<f64>) {
    let completed = rows.iter().filter(|r| r.state == RequestState::Completed).count();
    let aborted = rows.iter().filter(|r| r.state == RequestState::Aborted).count();
    let within = rows.iter().filter(|r| r.within_slo == Some(true)).count();
    let attainment = (completed > 0).then(|| within as f64 / completed as f64);
    let with_aborts =
        (completed + aborted > 0).then(|| within as f64 / (completed + aborted) as f64);
    (attainment, with_aborts)
}

pub fn build_rows(outcome: &SimOutcome, cfg: &ExperimentConfig) -> Vec<RequestRow> {
    outcome
        .requests
        .iter()
        .map(|r| RequestRow::from_request(r, cfg.metrics.slo_s_per_token))
        .collect()
}

pub fn build_report(outcome: &SimOutcome, cfg: &ExperimentConfig) -> Result<MetricsReport, Error> {
    let rows = build_rows(outcome, cfg);
    let completed: Vec<&RequestRow> = rows
        .iter()
        .filter(|r| r.state == RequestState::Completed)
        .collect();

    let counts = RequestCounts {
        total: rows.len(),
        completed: completed.len(),
        aborted: rows.iter().filter(|r| r.state == RequestState::Aborted).count(),
        aborted_queue_overflow: rows
            .iter()
            .filter(|r| r.abort_reason == Some(AbortReason::QueueOverflow))
            .count(),
        aborted_oversize: rows
            .iter()
            .filter(|r| r.abort_reason == Some(AbortReason::Oversize))
            .count(),
        preemptions: rows.iter().map(|r| r.preemptions as u64).sum(),
    };

    let collect = |f: fn(&RequestRow) -> Option<f64>| -> Vec<f64> {
        completed.iter().filter_map(|r| f(r)).collect()
    };
    let ttft = DistSummary::over(&collect(|r| r.ttft));
    let e2e = DistSummary::over(&collect(|r| r.e2e));
    let normalized = DistSummary::over(&collect(|r| r.normalized_latency));
    let tbt_means = collect(|r| r.tbt_mean);
    let tbt = if tbt_means.is_empty() {
        None
    } else {
        Some(TbtSummary {
            mean: tbt_means.iter().sum::<f64>() / tbt_means.len() as f64,
            max: collect(|r| r.tbt_max).iter().fold(0.0f64, |m, &v| m.max(v)),
        })
    };

    let (attainment, with_aborts) = slo_attainment(&rows);

    let pred_prefill: Vec<f64> = outcome.forecast_windows.iter().map(|w| w.predicted_prefill).collect();
    let act_prefill: Vec<f64> = outcome.forecast_windows.iter().map(|w| w.actual_prefill as f64).collect();
    let pred_decode: Vec<f64> = outcome.forecast_windows.iter().map(|w| w.predicted_decode).collect();
    let act_decode: Vec<f64> = outcome.forecast_windows.iter().map(|w| w.actual_decode as f64).collect();
    let forecast = ForecastReport {
        prefill: forecast_accuracy(&pred_prefill, &act_prefill)?,
        decode: forecast_accuracy(&pred_decode, &act_decode)?,
    };

    let predicted: Vec<u32> = completed.iter().map(|r| r.predicted_tokens).collect();
    let actual: Vec<u32> = completed.iter().map(|r| r.response_tokens).collect();
    let length_prediction = if predicted.is_empty() {
        None
    } else {
        Some(length_accuracy(&predicted, &actual)?)
    };

    Ok(MetricsReport {
        config: cfg.clone(),
        requests: counts,
        ttft,
        tbt,
        e2e,
        normalized_latency: normalized,
        slo: SloSummary {
            threshold_s_per_token: cfg.metrics.slo_s_per_token,
            attainment,
            attainment_with_aborts: with_aborts,
        },
        forecast,
        length_prediction,
        resource: ResourceSummary {
            instance_seconds: outcome.instance_seconds,
            mean_instances: (outcome.end_time > 0.0)
                .then(|| outcome.instance_seconds / outcome.end_time),
            end_time: outcome.end_time,
        },
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
struct TimelineRow {
    interval_start: f64,
    arrivals: usize,
    completions: usize,
    aborts: usize,
    mean_ttft: Option<f64>,
    mean_normalized_latency: Option<f64>,
    max_normalized_latency: Option<f64>,
    active_instances: f64,
    booting_instances: f64,
}

/// Per-interval aggregates: request flow by completion time plus
/// time-weighted instance counts from the cluster timeline.
fn build_timeline(outcome: &SimOutcome, rows: &[RequestRow], interval: f64) -> Vec<TimelineRow> {
    if outcome.end_time <= 0.0 {
        return Vec::new();
    }
    let n = (outcome.end_time / interval).ceil().max(1.0) as usize;
    let mut arrivals = vec![0usize; n];
    let mut aborts = vec![0usize; n];
    let mut ttfts: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut norms: Vec<Vec<f64>> = vec![Vec::new(); n];
    let bucket = |t: f64| -> usize { ((t / interval) as usize).min(n - 1) };

    for (row, req) in rows.iter().zip(&outcome.requests) {
        arrivals[bucket(row.arrival)] += 1;
        match row.state {
            RequestState::Completed => {
                let b = bucket(req.completion_time.unwrap());
                if let Some(t) = row.ttft {
                    ttfts[b].push(t);
                }
                if let Some(v) = row.normalized_latency {
                    norms[b].push(v);
                }
            }
            RequestState::Aborted => aborts[bucket(row.arrival)] += 1,
            _ => {}
        }
    }

    // Integrate the piecewise-constant instance counts over each bucket.
    let mut active_s = vec![0.0f64; n];
    let mut booting_s = vec![0.0f64; n];
    let samples = &outcome.timeline;
    for (i, s) in samples.iter().enumerate() {
        let seg_start = s.time;
        let seg_end = samples.get(i + 1).map_or(outcome.end_time, |next| next.time);
        let mut t = seg_start;
        while t < seg_end {
            let b = bucket(t);
            let seg = ((b + 1) as f64 * interval).min(seg_end);
            active_s[b] += (seg - t) * s.active as f64;
            booting_s[b] += (seg - t) * s.booting as f64;
            t = seg;
        }
    }

    (0..n)
        .map(|b| {
            let width = if b == n - 1 {
                outcome.end_time - b as f64 * interval
            } else {
                interval
            };
            let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            TimelineRow {
                interval_start: b as f64 * interval,
                arrivals: arrivals[b],
                completions: norms[b].len(),
                aborts: aborts[b],
                mean_ttft: mean(&ttfts[b]),
                mean_normalized_latency: mean(&norms[b]),
                max_normalized_latency: norms[b]
                    .iter()
                    .copied()
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
                active_instances: if width > 0.0 { active_s[b] / width } else { 0.0 },
                booting_instances: if width > 0.0 { booting_s[b] / width } else { 0.0 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
struct OverheadReport {
    predict_s_total: f64,
    route_s_total: f64,
    predictions: u64,
    route_decisions: u64,
    mean_overhead_per_request_s: Option<f64>,
    mean_e2e_s: Option<f64>,
    overhead_ratio: Option<f64>,
}

/// Writes report.json, overhead.json, requests.csv, timeline.csv, and
/// instance_timeline.csv under `dir`, returning the report.
pub fn write_report_files(
    outcome: &SimOutcome,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<MetricsReport, Error> {
    fs::create_dir_all(dir)?;
    let report = build_report(outcome, cfg)?;
    let rows = build_rows(outcome, cfg);

    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    fs::write(dir.join("report.json"), json)?;

    let total = outcome.requests.len() as u64;
    let mean_overhead = (total > 0).then(|| {
        (outcome.overhead.predict_s + outcome.overhead.route_s) / total as f64
    });
    let mean_e2e = report.e2e.map(|d| d.mean);
    let overhead = OverheadReport {
        predict_s_total: outcome.overhead.predict_s,
        route_s_total: outcome.overhead.route_s,
        predictions: outcome.overhead.predictions,
        route_decisions: outcome.overhead.route_decisions,
        mean_overhead_per_request_s: mean_overhead,
        mean_e2e_s: mean_e2e,
        overhead_ratio: match (mean_overhead, mean_e2e) {
            (Some(o), Some(e)) if e > 0.0 => Some(o / e),
            _ => None,
        },
    };
    let mut w = fs::File::create(dir.join("overhead.json"))?;
    serde_json::to_writer_pretty(&mut w, &overhead).expect("overhead serializes");
    writeln!(w)?;

    let mut wtr = csv::Writer::from_path(dir.join("requests.csv")).map_err(csv_io)?;
    for row in &rows {
        wtr.serialize(row).map_err(csv_io)?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(dir.join("timeline.csv")).map_err(csv_io)?;
    for row in build_timeline(outcome, &rows, cfg.metrics.timeline_interval_s) {
        wtr.serialize(row).map_err(csv_io)?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(dir.join("instance_timeline.csv")).map_err(csv_io)?;
    #[derive(Serialize)]
    struct InstanceRow {
        window_index: u64,
        window_start: f64,
        instance_id: u32,
        prefill_tokens: u64,
        decode_tokens: u64,
        latency_violation: bool,
    }
    for s in &outcome.instance_windows {
        wtr.serialize(InstanceRow {
            window_index: s.window_index,
            window_start: s.window_index as f64 * cfg.forecast.window_s,
            instance_id: s.instance_id,
            prefill_tokens: s.prefill_tokens,
            decode_tokens: s.decode_tokens,
            latency_violation: s.latency_violation,
        })
        .map_err(csv_io)?;
    }
    wtr.flush()?;

    Ok(report)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank_endpoints() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 100.0), Some(5.0));
        assert_eq!(percentile(&v, 50.0), Some(3.0));
        // Monotone in p.
        let mut last = f64::MIN;
        for p in 0..=100 {
            let x = percentile(&v, p as f64).unwrap();
            assert!(x >= last);
            last = x;
        }
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn forecast_accuracy_formula_and_zero_exclusion() {
        let s = forecast_accuracy(&[110.0], &[100.0]).unwrap().unwrap();
        assert!((s.mean_ape - 0.10).abs() < 1e-12);

        let s = forecast_accuracy(&[90.0, 150.0], &[100.0, 100.0]).unwrap().unwrap();
        assert!((s.mean_ape - 0.30).abs() < 1e-12);
        assert!((s.max_ape - 0.50).abs() < 1e-12);

        let s = forecast_accuracy(&[100.0, 100.0], &[100.0, 100.0]).unwrap().unwrap();
        assert_eq!(s.mean_ape, 0.0);
        assert_eq!(s.max_ape, 0.0);

        let s = forecast_accuracy(&[5.0, 110.0], &[0.0, 100.0]).unwrap().unwrap();
        assert_eq!(s.excluded_zero_actual, 1);
        assert_eq!(s.windows, 1);
        assert!((s.mean_ape - 0.10).abs() < 1e-12);

        assert!(forecast_accuracy(&[1.0], &[]).is_err());
        assert!(forecast_accuracy(&[0.0], &[0.0]).unwrap().is_none());
    }

    #[test]
    fn length_accuracy_inclusive_boundary() {
        let acc = length_accuracy(&[100], &[87]).unwrap();
        assert_eq!(acc.mae, 13.0);
        assert_eq!(acc.acc25, 1.0);

        // Exactly 25 off still counts as within 25.
        let acc = length_accuracy(&[125], &[100]).unwrap();
        assert_eq!(acc.acc25, 1.0);
        let acc = length_accuracy(&[126], &[100]).unwrap();
        assert_eq!(acc.acc25, 0.0);
        assert_eq!(acc.acc50, 1.0);

        assert!(length_accuracy(&[], &[]).is_err());
        assert!(length_accuracy(&[1, 2], &[1]).is_err());
    }

    fn row(state: RequestState, norm: Option<f64>, slo: f64) -> RequestRow {
        RequestRow {
            request_id: 0,
            arrival: 0.0,
            prompt_tokens: 1,
            response_tokens: 1,
            predicted_tokens: 1,
            state,
            abort_reason: (state == RequestState::Aborted).then_some(AbortReason::QueueOverflow),
            instance: None,
            preemptions: 0,
            ttft: None,
            tbt_mean: None,
            tbt_max: None,
            e2e: None,
            normalized_latency: norm,
            within_slo: norm.map(|v| v <= slo),
        }
    }

    #[test]
    fn attainment_counts_aborts_only_in_variant() {
        let rows = vec![
            row(RequestState::Completed, Some(0.1), 0.2),
            row(RequestState::Completed, Some(0.3), 0.2),
            row(RequestState::Completed, Some(0.15), 0.2),
            row(RequestState::Aborted, None, 0.2),
        ];
        let (a, wa) = slo_attainment(&rows);
        assert!((a.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((wa.unwrap() - 2.0 / 4.0).abs() < 1e-12);
        assert!(wa.unwrap() <= a.unwrap());

        let (a, wa) = slo_attainment(&[]);
        assert!(a.is_none());
        assert!(wa.is_none());
    }

    #[test]
    fn normalized_latency_golden() {
        use crate::simcore::SimRequest;
        let mut req = SimRequest::new(7, 0.0, 10, 50);
        req.state = RequestState::Completed;
        req.predicted_tokens = 50;
        req.first_token_time = Some(0.5);
        req.completion_time = Some(10.0);
        req.generated = 50;
        let r = RequestRow::from_request(&req, 0.2);
        assert_eq!(r.ttft, Some(0.5));
        assert_eq!(r.normalized_latency, Some(0.2));
        assert_eq!(r.within_slo, Some(true));

        // One output token: normalized equals end-to-end.
        let mut req = SimRequest::new(8, 0.0, 10, 1);
        req.state = RequestState::Completed;
        req.first_token_time = Some(0.5);
        req.completion_time = Some(0.5);
        req.generated = 1;
        let r = RequestRow::from_request(&req, 0.2);
        assert_eq!(r.normalized_latency, r.e2e);
    }
}
