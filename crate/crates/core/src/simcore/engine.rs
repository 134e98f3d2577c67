//! The event loop: replays a trace against the cluster, feeding the
//! router, scaler, length predictor, and window forecasters, and collects
//! everything the metrics layer needs.
//!
//! Event kinds are ranked so simultaneous events resolve the same way
//! every run: boot completions land before window boundaries, boundaries
//! before scaler ticks, iteration ends before arrivals.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, PredictorKind};
use crate::error::{Error, SimError};
use crate::forecast::{
    required_instances, CapacityProfile, ForecastModel, InstanceWindowStats, OnlineForecaster,
    SeasonalNaive, TwoStepForecast,
};
use crate::loadpred::{calibrate_noise, NoiseParams, Predictor};
use crate::router::{RouteOutcome, Router};
use crate::scaler::{ScaleAction, ScaleReason, Scaler, ScalerPolicy};
use crate::trace::{LengthSource, TraceRecord, DAY_SECONDS};
use crate::{InstanceId, RequestId};

use super::cluster::{Cluster, ClusterSample};
use super::event::{EventKind, EventQueue};
use super::instance::{CostModel, InstanceStatus};
use super::request::{AbortReason, RequestState, SimRequest};

/// Wall-clock cost of management decisions, kept apart from simulated
/// time and from the deterministic report.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct OverheadTotals {
    pub predict_s: f64,
    pub route_s: f64,
    pub route_decisions: u64,
    pub predictions: u64,
}

/// One window's ahead-of-time forecast next to what actually arrived.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ForecastWindowRecord {
    pub window_index: u64,
    pub predicted_prefill: f64,
    pub predicted_decode: f64,
    pub actual_prefill: u64,
    pub actual_decode: u64,
}

/// Everything a finished run exposes for reporting.
#[derive(Debug)]
pub struct SimOutcome {
    /// Final request states, indexed by internal id (input order).
    pub requests: Vec<SimRequest>,
    pub timeline: Vec<ClusterSample>,
    pub instance_windows: Vec<InstanceWindowStats>,
    pub forecast_windows: Vec<ForecastWindowRecord>,
    pub end_time: f64,
    pub instance_seconds: f64,
    pub overhead: OverheadTotals,
}

/// Runs one simulation to completion. `model` drives the window
/// forecasts when given; otherwise a seasonal-naive fallback kicks in
/// once it has a full day of windows. `event_log` receives one JSON
/// object per line when set.
pub fn run(
    cfg: &ExperimentConfig,
    records: &[TraceRecord],
    model: Option<ForecastModel>,
    event_log: Option<&mut dyn Write>,
) -> Result<SimOutcome, Error> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg, records, model, event_log)?;
    engine.run_loop()?;
    engine.finish()
}

struct Engine<'c, 'w> {
    cfg: &'c ExperimentConfig,
    cost: CostModel,
    cluster: Cluster,
    requests: Vec<SimRequest>,
    events: EventQueue,
    router: Router,
    router_queue: VecDeque<RequestId>,
    scaler: Scaler,
    predictor: Predictor,
    forecaster: Option<OnlineForecaster>,
    naive: SeasonalNaive,
    capacity: CapacityProfile,
    window_s: f64,
    window_index: u64,
    win_prefill: u64,
    win_decode: u64,
    /// Step-one forecast made at the last boundary, graded at the next.
    pending_next: Option<(u64, f64, f64)>,
    forecast_windows: Vec<ForecastWindowRecord>,
    instance_windows: Vec<InstanceWindowStats>,
    live: usize,
    now: f64,
    overhead: OverheadTotals,
    log: Option<&'w mut dyn Write>,
}

impl<'c, 'w> Engine<'c, 'w> {
    fn new(
        cfg: &'c ExperimentConfig,
        records: &[TraceRecord],
        model: Option<ForecastModel>,
        log: Option<&'w mut dyn Write>,
    ) -> Result<Self, Error> {
        let (initial, min, max) = cfg.effective_cluster();
        let lookahead_len = cfg.router.lookahead.max(cfg.scaler.lookahead);
        let cluster = Cluster::new(
            initial,
            min,
            max,
            cfg.cluster.kv_capacity_tokens,
            lookahead_len,
        )?;

        let predictor = build_predictor(cfg, records)?;
        let window_s = cfg.forecast.window_s;
        let naive_period = ((DAY_SECONDS / window_s).round() as usize).max(1);

        let mut events = EventQueue::default();
        let mut requests = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            requests.push(SimRequest::new(
                r.request_id,
                r.arrival_time,
                r.prompt_tokens,
                r.response_tokens,
            ));
            events.push(r.arrival_time, EventKind::Arrival {
                request: i as RequestId,
            });
        }
        events.push(window_s, EventKind::WindowBoundary);
        if cfg.scaler.policy != ScalerPolicy::None {
            events.push(cfg.scaler.tick_interval_s, EventKind::ScalerTick);
        }

        Ok(Engine {
            cfg,
            cost: cfg.cost,
            cluster,
            live: requests.len(),
            requests,
            events,
            router: Router::new(cfg.router),
            router_queue: VecDeque::new(),
            scaler: Scaler::new(cfg.scaler),
            predictor,
            forecaster: model.map(OnlineForecaster::new),
            naive: SeasonalNaive::new(naive_period),
            capacity: cfg.forecast.capacity,
            window_s,
            window_index: 0,
            win_prefill: 0,
            win_decode: 0,
            pending_next: None,
            forecast_windows: Vec::new(),
            instance_windows: Vec::new(),
            now: 0.0,
            overhead: OverheadTotals::default(),
            log,
        })
    }

    fn run_loop(&mut self) -> Result<(), Error> {
        while self.live > 0 {
            let Some(ev) = self.events.pop() else {
                return Err(SimError::State(
                    "event queue drained with live requests remaining".into(),
                )
                .into());
            };
            debug_assert!(ev.time >= self.now - 1e-9, "clock moved backwards");
            self.now = ev.time;
            match ev.kind {
                EventKind::BootComplete { instance } => self.on_boot_complete(instance)?,
                EventKind::WindowBoundary => self.on_window_boundary()?,
                EventKind::ScalerTick => self.on_scaler_tick()?,
                EventKind::IterationEnd { instance } => self.on_iteration_end(instance)?,
                EventKind::Arrival { request } => self.on_arrival(request)?,
            }
            if self.cfg.sim.validate {
                self.validate_state()?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutcome, Error> {
        self.cluster.finish(self.now);
        for (i, req) in self.requests.iter().enumerate() {
            let ok = match req.state {
                RequestState::Completed => {
                    req.generated == req.response_tokens
                        && req.first_token_time.is_some()
                        && req.completion_time.is_some()
                }
                RequestState::Aborted => req.abort_reason.is_some(),
                _ => false,
            };
            if !ok {
                return Err(SimError::State(format!(
                    "request {i} ended in inconsistent state {:?}",
                    req.state
                ))
                .into());
            }
        }
        Ok(SimOutcome {
            requests: self.requests,
            timeline: std::mem::take(&mut self.cluster.timeline),
            instance_windows: self.instance_windows,
            forecast_windows: self.forecast_windows,
            end_time: self.now,
            instance_seconds: self.cluster.instance_seconds(),
            overhead: self.overhead,
        })
    }

    fn log_line(&mut self, value: serde_json::Value) -> Result<(), SimError> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{value}")?;
        }
        Ok(())
    }

    fn on_arrival(&mut self, rid: RequestId) -> Result<(), Error> {
        let (prompt, response) = {
            let req = &self.requests[rid as usize];
            (req.prompt_tokens, req.response_tokens)
        };
        self.win_prefill += prompt as u64;
        self.win_decode += response as u64;

        let t0 = Instant::now();
        let predicted = self.predictor.predict(response);
        self.overhead.predict_s += t0.elapsed().as_secs_f64();
        self.overhead.predictions += 1;
        self.requests[rid as usize].predicted_tokens = predicted;

        self.log_line(json!({
            "t": self.now,
            "event": "arrival",
            "request": self.requests[rid as usize].external_id,
            "prompt_tokens": prompt,
            "predicted_tokens": predicted,
        }))?;

        // A request that cannot fit on an empty instance can never be
        // admitted; reject it here rather than hold it forever.
        if prompt as u64 + 1 > self.cfg.cluster.kv_capacity_tokens {
            return self.abort(rid, AbortReason::Oversize);
        }

        match self.choose_timed(rid) {
            RouteOutcome::Dispatch(iid) => self.dispatch(rid, iid)?,
            RouteOutcome::Hold => {
                if self.router_queue.len() >= self.router.cfg.queue_capacity {
                    return self.abort(rid, AbortReason::QueueOverflow);
                }
                self.router_queue.push_back(rid);
                self.requests[rid as usize].state = RequestState::RouterQueued;
                self.log_line(json!({
                    "t": self.now,
                    "event": "hold",
                    "request": self.requests[rid as usize].external_id,
                    "queued": self.router_queue.len(),
                }))?;
            }
        }
        Ok(())
    }

    fn choose_timed(&mut self, rid: RequestId) -> RouteOutcome {
        let (prompt, predicted) = {
            let req = &self.requests[rid as usize];
            (req.prompt_tokens as u64, req.predicted_tokens as u64)
        };
        let t0 = Instant::now();
        let outcome = self
            .router
            .choose(&self.cluster, &self.requests, prompt, predicted, self.now);
        self.overhead.route_s += t0.elapsed().as_secs_f64();
        self.overhead.route_decisions += 1;
        outcome
    }

    fn abort(&mut self, rid: RequestId, reason: AbortReason) -> Result<(), Error> {
        let req = &mut self.requests[rid as usize];
        req.state = RequestState::Aborted;
        req.abort_reason = Some(reason);
        let ext = req.external_id;
        self.live -= 1;
        self.log_line(json!({
            "t": self.now,
            "event": "abort",
            "request": ext,
            "reason": reason,
        }))?;
        Ok(())
    }

    fn dispatch(&mut self, rid: RequestId, iid: InstanceId) -> Result<(), Error> {
        {
            let req = &mut self.requests[rid as usize];
            req.state = RequestState::InstanceQueued;
            req.instance = Some(iid);
        }
        self.cluster.get_mut(iid).queue.push_back(rid);
        let score = self.router.last_score.take();
        self.log_line(json!({
            "t": self.now,
            "event": "dispatch",
            "request": self.requests[rid as usize].external_id,
            "instance": iid,
            "score": score,
        }))?;
        self.start_instance(iid)
    }

    /// Plans the next iteration on an idle instance, recording any
    /// preemptions or oversize aborts the plan produced. A plan that
    /// only evicted or aborted leaves requeued work behind, so keep
    /// planning until something runs or the instance is truly idle;
    /// each extra round either schedules or shrinks the queue, so this
    /// terminates.
    fn start_instance(&mut self, iid: InstanceId) -> Result<(), Error> {
        loop {
            if self.cluster.get(iid).running.is_some() {
                return Ok(());
            }
            let plan = self
                .cluster
                .get_mut(iid)
                .plan_iteration(&mut self.requests, &self.cost, self.now);
            for &rid in &plan.aborted_oversize {
                let ext = self.requests[rid as usize].external_id;
                self.live -= 1;
                self.log_line(json!({
                    "t": self.now,
                    "event": "abort",
                    "request": ext,
                    "reason": AbortReason::Oversize,
                    "instance": iid,
                }))?;
            }
            for &rid in &plan.evicted {
                let ext = self.requests[rid as usize].external_id;
                self.log_line(json!({
                    "t": self.now,
                    "event": "preempt",
                    "request": ext,
                    "instance": iid,
                }))?;
            }
            if plan.scheduled {
                self.events
                    .push(self.now + plan.elapsed, EventKind::IterationEnd { instance: iid });
                return Ok(());
            }
            if plan.evicted.is_empty() && plan.aborted_oversize.is_empty() {
                return Ok(());
            }
        }
    }

    fn on_iteration_end(&mut self, iid: InstanceId) -> Result<(), Error> {
        let effects = self
            .cluster
            .get_mut(iid)
            .complete_iteration(&mut self.requests, self.now);

        let slo = self.cfg.metrics.slo_s_per_token;
        for &rid in &effects.completed {
            let (ext, violates, actual) = {
                let req = &self.requests[rid as usize];
                let e2e = req.completion_time.unwrap() - req.arrival;
                let norm = e2e / req.response_tokens as f64;
                (req.external_id, norm > slo, req.response_tokens)
            };
            self.live -= 1;
            self.predictor.observe_completion(actual);
            if violates {
                self.cluster.get_mut(iid).win_violation = true;
            }
            self.log_line(json!({
                "t": self.now,
                "event": "complete",
                "request": ext,
                "instance": iid,
                "tokens": actual,
            }))?;
        }

        if self.cluster.get(iid).has_work() {
            self.start_instance(iid)?;
        } else if self.cluster.get(iid).status == InstanceStatus::Isolated {
            self.cluster.stop_if_drained(iid, self.now);
            if self.cluster.get(iid).status == InstanceStatus::Stopped {
                self.log_line(json!({
                    "t": self.now,
                    "event": "stop",
                    "instance": iid,
                }))?;
            }
        }
        self.drain_router_queue()
    }

    fn on_boot_complete(&mut self, iid: InstanceId) -> Result<(), Error> {
        self.cluster.on_boot_complete(iid, self.now);
        if self.cluster.get(iid).status == InstanceStatus::Active {
            self.log_line(json!({
                "t": self.now,
                "event": "boot_complete",
                "instance": iid,
            }))?;
            self.drain_router_queue()?;
        }
        Ok(())
    }

    fn on_scaler_tick(&mut self) -> Result<(), Error> {
        let actions = self.scaler.tick(&self.cluster);
        self.apply_actions(actions)?;
        if self.live > 0 {
            self.events
                .push(self.now + self.cfg.scaler.tick_interval_s, EventKind::ScalerTick);
        }
        self.drain_router_queue()
    }

    fn on_window_boundary(&mut self) -> Result<(), Error> {
        let ended = self.window_index;
        let actual_prefill = self.win_prefill;
        let actual_decode = self.win_decode;
        self.win_prefill = 0;
        self.win_decode = 0;

        if let Some((idx, pp, pd)) = self.pending_next.take() {
            debug_assert_eq!(idx, ended);
            self.forecast_windows.push(ForecastWindowRecord {
                window_index: ended,
                predicted_prefill: pp,
                predicted_decode: pd,
                actual_prefill,
                actual_decode,
            });
        }

        if let Some(f) = self.forecaster.as_mut() {
            f.observe(actual_prefill as f64, actual_decode as f64);
        }
        self.naive.observe(actual_prefill as f64, actual_decode as f64);

        let two_step: Option<TwoStepForecast> = match self.forecaster.as_ref() {
            Some(f) => f.predict_two_step(),
            None => self.naive.predict_two_step(),
        };
        let target = two_step.map(|ts| {
            required_instances(
                ts.following.prefill_tokens,
                ts.following.decode_tokens,
                &self.capacity,
            )
        });
        if let Some(ts) = &two_step {
            self.pending_next = Some((
                ended + 1,
                ts.next.prefill_tokens,
                ts.next.decode_tokens,
            ));
        }

        for inst in &mut self.cluster.instances {
            let (prefill, decode, violation) = inst.reset_window_counters();
            if inst.status != InstanceStatus::Stopped || prefill > 0 || decode > 0 {
                self.instance_windows.push(InstanceWindowStats {
                    instance_id: inst.id,
                    window_index: ended,
                    prefill_tokens: prefill,
                    decode_tokens: decode,
                    latency_violation: violation,
                });
            }
            inst.prune_busy(self.now, self.router.cfg.busy_window_s);
        }

        self.log_line(json!({
            "t": self.now,
            "event": "window",
            "index": ended,
            "actual_prefill": actual_prefill,
            "actual_decode": actual_decode,
            "forecast": two_step.map(|ts| json!({
                "next_prefill": ts.next.prefill_tokens,
                "next_decode": ts.next.decode_tokens,
                "following_prefill": ts.following.prefill_tokens,
                "following_decode": ts.following.decode_tokens,
            })),
            "target_instances": target,
        }))?;

        let actions = self.scaler.window_boundary(target, &self.cluster);
        self.apply_actions(actions)?;

        self.window_index += 1;
        if self.live > 0 {
            self.events.push(
                (self.window_index + 1) as f64 * self.window_s,
                EventKind::WindowBoundary,
            );
        }
        self.drain_router_queue()
    }

    fn apply_actions(&mut self, actions: Vec<ScaleAction>) -> Result<(), Error> {
        for action in actions {
            match action {
                ScaleAction::Boot { reason } => match self.cluster.boot_instance(self.now, &self.cost) {
                    Ok(id) => {
                        let ready = self.cluster.get(id).boot_ready;
                        self.events.push(ready, EventKind::BootComplete { instance: id });
                        self.log_line(json!({
                            "t": self.now,
                            "event": "scale_up",
                            "instance": id,
                            "reason": reason,
                            "ready_at": ready,
                        }))?;
                    }
                    Err(_) => {
                        self.log_line(json!({
                            "t": self.now,
                            "event": "scale_denied",
                            "reason": reason,
                            "at_instances": self.cluster.current_count(),
                        }))?;
                    }
                },
                ScaleAction::Isolate { instance, reason } => {
                    self.isolate_instance(instance, reason)?;
                }
            }
        }
        Ok(())
    }

    /// Pulls queued-but-unadmitted requests back to the router (keeping
    /// their order at the queue front) and takes the instance out of
    /// routing; residents keep decoding until drained.
    fn isolate_instance(&mut self, iid: InstanceId, reason: ScaleReason) -> Result<(), Error> {
        let unadmitted = self.cluster.get_mut(iid).drain_unadmitted();
        for &rid in unadmitted.iter().rev() {
            let req = &mut self.requests[rid as usize];
            req.state = RequestState::RouterQueued;
            req.instance = None;
            self.router_queue.push_front(rid);
        }
        self.cluster.isolate(iid, self.now);
        let stopped = self.cluster.get(iid).status == InstanceStatus::Stopped;
        self.log_line(json!({
            "t": self.now,
            "event": "scale_down",
            "instance": iid,
            "reason": reason,
            "requeued": unadmitted.len(),
            "stopped": stopped,
        }))?;
        Ok(())
    }

    /// Re-routes held requests in order until one fails to place.
    fn drain_router_queue(&mut self) -> Result<(), Error> {
        while let Some(&rid) = self.router_queue.front() {
            match self.choose_timed(rid) {
                RouteOutcome::Dispatch(iid) => {
                    self.router_queue.pop_front();
                    self.dispatch(rid, iid)?;
                }
                RouteOutcome::Hold => break,
            }
        }
        Ok(())
    }

    fn validate_state(&self) -> Result<(), Error> {
        for inst in &self.cluster.instances {
            if inst.status == InstanceStatus::Stopped {
                continue;
            }
            let ledger = inst.kv_ledger_sum(&self.requests);
            if inst.kv_used != ledger {
                return Err(SimError::State(format!(
                    "instance {}: kv ledger {} disagrees with resident sum {}",
                    inst.id, inst.kv_used, ledger
                ))
                .into());
            }
            if inst.kv_used > inst.kv_capacity {
                return Err(SimError::State(format!(
                    "instance {}: kv {} over capacity {}",
                    inst.id, inst.kv_used, inst.kv_capacity
                ))
                .into());
            }
            if !inst.map.ledger_consistent() {
                return Err(SimError::State(format!(
                    "instance {}: look-ahead map out of sync with its ledger",
                    inst.id
                ))
                .into());
            }
        }
        Ok(())
    }
}

fn build_predictor(cfg: &ExperimentConfig, records: &[TraceRecord]) -> Result<Predictor, Error> {
    let max_tokens = cfg.cluster.max_model_len;
    let p = &cfg.predictor;
    Ok(match p.kind {
        PredictorKind::Oracle => Predictor::oracle(),
        PredictorKind::Heuristic => {
            Predictor::heuristic(p.heuristic_window, p.heuristic_fallback, max_tokens)
        }
        PredictorKind::Noisy => {
            let params = match (p.zero_prob, p.laplace_scale) {
                (Some(z), Some(b)) => NoiseParams {
                    zero_prob: z,
                    laplace_scale: b,
                },
                _ if records.is_empty() => NoiseParams {
                    zero_prob: 1.0,
                    laplace_scale: 0.0,
                },
                _ => {
                    let pairs: Vec<(u32, u32)> = records
                        .iter()
                        .map(|r| (r.prompt_tokens, r.response_tokens))
                        .collect();
                    let lengths = LengthSource::Empirical(pairs);
                    calibrate_noise(
                        &p.profile,
                        &lengths,
                        max_tokens,
                        p.calibration_samples,
                        cfg.sim.seed ^ 0x6361_6c69,
                    )?
                    .params
                }
            };
            Predictor::noisy(params, max_tokens, cfg.sim.seed ^ 0x6e6f_6973)
        }
    })
}
