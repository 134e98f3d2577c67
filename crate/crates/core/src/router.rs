//! Request routing across active instances.
//!
//! The load-aware policy scores each instance by prefill backlog,
//! outstanding predicted decode work, and a penalty for projected KV
//! pressure, then dispatches to the lowest score. When every active
//! instance projects overload for the incoming request, the request
//! waits in a bounded router queue. Round-robin, least-request, and
//! minimum-use baselines share the same dispatch plumbing.

use serde::{Deserialize, Serialize};

use crate::simcore::{Cluster, Instance, SimRequest};
use crate::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPolicy {
    Predictive,
    RoundRobin,
    LeastRequest,
    MinUse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub policy: RouterPolicy,
    pub queue_capacity: usize,
    /// Penalty coefficient on projected memory overflow.
    pub memory_penalty: f64,
    /// Projected usage above this fraction starts drawing penalty.
    pub memory_threshold: f64,
    /// Iterations of look-ahead for peak and overload queries.
    pub lookahead: usize,
    pub overload_usage_threshold: f64,
    pub overload_iteration_fraction: f64,
    /// Rolling window for the minimum-use occupancy proxy.
    pub busy_window_s: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            policy: RouterPolicy::Predictive,
            queue_capacity: 256,
            memory_penalty: 1.0,
            memory_threshold: 0.80,
            lookahead: 100,
            overload_usage_threshold: 0.95,
            overload_iteration_fraction: 0.10,
            busy_window_s: 60.0,
        }
    }
}

/// Load estimate for dispatching one request to one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RouteScore {
    pub prefill_load: f64,
    pub decode_load: f64,
    pub memory_overflow: f64,
    pub total: f64,
}

impl RouteScore {
    /// `queued_prefill` and `outstanding_decode` are the instance's
    /// current backlogs; `peak_usage` is the projected KV peak with the
    /// incoming request applied.
    pub fn compute(
        queued_prefill: u64,
        outstanding_decode: u64,
        peak_usage: f64,
        kv_capacity: u64,
        prompt: u64,
        predicted: u64,
        cfg: &RouterConfig,
    ) -> RouteScore {
        let prefill_load = (queued_prefill + prompt) as f64;
        let decode_load = (outstanding_decode + predicted) as f64;
        let memory_overflow = (peak_usage - cfg.memory_threshold).max(0.0) * kv_capacity as f64;
        RouteScore {
            prefill_load,
            decode_load,
            memory_overflow,
            total: prefill_load + decode_load + cfg.memory_penalty * memory_overflow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RouteOutcome {
    Dispatch(InstanceId),
    /// No instance can take the request now; hold it at the router.
    Hold,
}

#[derive(Debug)]
pub struct Router {
    pub cfg: RouterConfig,
    rr_cursor: Option<InstanceId>,
    /// Last dispatch's score breakdown, for the event log.
    pub last_score: Option<RouteScore>,
}

impl Router {
    pub fn new(cfg: RouterConfig) -> Self {
        Router {
            cfg,
            rr_cursor: None,
            last_score: None,
        }
    }

    pub fn score_instance(
        &self,
        inst: &Instance,
        reqs: &[SimRequest],
        prompt: u64,
        predicted: u64,
    ) -> RouteScore {
        let peak = inst
            .map
            .peek_peak(self.cfg.lookahead, Some((prompt, predicted)));
        RouteScore::compute(
            inst.queued_prefill_tokens(reqs),
            inst.outstanding_decode_tokens(reqs),
            peak,
            inst.kv_capacity,
            prompt,
            predicted,
            &self.cfg,
        )
    }

    pub fn choose(
        &mut self,
        cluster: &Cluster,
        reqs: &[SimRequest],
        prompt: u64,
        predicted: u64,
        now: f64,
    ) -> RouteOutcome {
        self.last_score = None;
        let actives: Vec<InstanceId> = cluster.active_ids().collect();
        if actives.is_empty() {
            return RouteOutcome::Hold;
        }
        match self.cfg.policy {
            RouterPolicy::Predictive => self.choose_predictive(cluster, reqs, &actives, prompt, predicted),
            RouterPolicy::RoundRobin => {
                let next = actives
                    .iter()
                    .copied()
                    .find(|&id| self.rr_cursor.map_or(true, |c| id > c))
                    .unwrap_or(actives[0]);
                self.rr_cursor = Some(next);
                RouteOutcome::Dispatch(next)
            }
            RouterPolicy::LeastRequest => {
                let best = actives
                    .iter()
                    .copied()
                    .min_by_key(|&id| cluster.get(id).assigned_count())
                    .unwrap();
                RouteOutcome::Dispatch(best)
            }
            RouterPolicy::MinUse => {
                let mut best = actives[0];
                let mut best_score = f64::INFINITY;
                for &id in &actives {
                    let inst = cluster.get(id);
                    let s = 0.5 * inst.occupancy(now, self.cfg.busy_window_s) + 0.5 * inst.kv_usage();
                    if s < best_score {
                        best_score = s;
                        best = id;
                    }
                }
                RouteOutcome::Dispatch(best)
            }
        }
    }

    fn choose_predictive(
        &mut self,
        cluster: &Cluster,
        reqs: &[SimRequest],
        actives: &[InstanceId],
        prompt: u64,
        predicted: u64,
    ) -> RouteOutcome {
        // An idle instance is never overloaded: with nothing resident
        // the projection is the candidate's own footprint, and no
        // amount of holding produces a better host than an idle one.
        let all_overloaded = actives.iter().all(|&id| {
            let inst = cluster.get(id);
            inst.has_work()
                && inst.map.overload_fraction(
                    self.cfg.lookahead,
                    self.cfg.overload_usage_threshold,
                    Some((prompt, predicted)),
                ) > self.cfg.overload_iteration_fraction
        });
        if all_overloaded {
            return RouteOutcome::Hold;
        }
        let mut best = actives[0];
        let mut best_score = self.score_instance(cluster.get(best), reqs, prompt, predicted);
        for &id in &actives[1..] {
            let s = self.score_instance(cluster.get(id), reqs, prompt, predicted);
            if s.total < best_score.total {
                best_score = s;
                best = id;
            }
        }
        self.last_score = Some(best_score);
        RouteOutcome::Dispatch(best)
    }
}
