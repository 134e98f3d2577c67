//! One serving instance: continuous batching with chunked prefill,
//! KV accounting, and preemption by recompute.
//!
//! Each iteration every decoding resident emits one token and up to
//! `max_prefill_chunk` prompt tokens are prefilled from the queue.
//! Admission charges the full base (prompt plus retained generated
//! tokens) and requires base+1 free; later growth is protected by the
//! eviction loop, which removes the latest-admitted resident until the
//! next step fits. Evicted requests return to the queue front and must
//! re-prefill everything, but are barred from re-admission inside the
//! same planning pass.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::anticipator::LookAheadMap;
use crate::simcore::request::{AbortReason, RequestState, SimRequest};
use crate::{InstanceId, RequestId};

/// Linear iteration latency model plus instance-level constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub base_iteration_s: f64,
    pub per_prefill_token_s: f64,
    pub per_decode_token_s: f64,
    pub max_prefill_chunk: u32,
    pub cold_start_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_iteration_s: 0.065,
            per_prefill_token_s: 0.0004,
            per_decode_token_s: 0.0015,
            max_prefill_chunk: 512,
            cold_start_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Booting,
    Active,
    Isolated,
    Stopped,
}

#[derive(Debug, Clone, Copy)]
struct Resident {
    id: RequestId,
    admit_seq: u64,
}

#[derive(Debug, Clone)]
pub struct RunningIteration {
    pub started: f64,
    pub ends: f64,
    pub decode: Vec<RequestId>,
    pub chunks: Vec<(RequestId, u32)>,
}

/// Iteration plan side effects that the engine must account for.
#[derive(Debug, Default)]
pub struct PlanResult {
    pub aborted_oversize: Vec<RequestId>,
    pub evicted: Vec<RequestId>,
    pub scheduled: bool,
    pub elapsed: f64,
}

/// What happened when an iteration finished.
#[derive(Debug, Default)]
pub struct IterationEffects {
    pub emitted: Vec<RequestId>,
    /// Requests whose (re)prefill finished now; they join the look-ahead
    /// map unless they also completed.
    pub first_tokens: Vec<RequestId>,
    pub completed: Vec<RequestId>,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
}

#[derive(Debug)]
pub struct Instance {
    pub id: InstanceId,
    pub status: InstanceStatus,
    pub kv_capacity: u64,
    pub kv_used: u64,
    pub queue: VecDeque<RequestId>,
    residents: Vec<Resident>,
    pub map: LookAheadMap,
    pub running: Option<RunningIteration>,
    /// Time this instance finishes booting; meaningful while booting.
    pub boot_ready: f64,
    admit_seq: u64,
    /// Recent busy intervals, pruned to the occupancy window.
    busy: VecDeque<(f64, f64)>,
    // Emission counters for the current profiling window.
    pub win_prefill_tokens: u64,
    pub win_decode_tokens: u64,
    pub win_violation: bool,
}

impl Instance {
    pub fn new(id: InstanceId, kv_capacity: u64, lookahead_len: usize, status: InstanceStatus) -> Self {
        Instance {
            id,
            status,
            kv_capacity,
            kv_used: 0,
            queue: VecDeque::new(),
            residents: Vec::new(),
            map: LookAheadMap::new(kv_capacity, lookahead_len),
            running: None,
            boot_ready: 0.0,
            admit_seq: 0,
            busy: VecDeque::new(),
            win_prefill_tokens: 0,
            win_decode_tokens: 0,
            win_violation: false,
        }
    }

    pub fn resident_count(&self) -> usize {
        self.residents.len()
    }

    pub fn resident_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.residents.iter().map(|r| r.id)
    }

    /// Requests assigned and not yet finished: queued, prefilling, or
    /// decoding here.
    pub fn assigned_count(&self) -> usize {
        self.residents.len() + self.queue.len()
    }

    pub fn kv_usage(&self) -> f64 {
        self.kv_used as f64 / self.kv_capacity as f64
    }

    /// Unprefilled prompt tokens: remaining chunks of residents still
    /// prefilling plus full bases waiting in the queue.
    pub fn queued_prefill_tokens(&self, reqs: &[SimRequest]) -> u64 {
        let resident: u64 = self
            .residents
            .iter()
            .filter(|r| reqs[r.id as usize].state == RequestState::Prefilling)
            .map(|r| reqs[r.id as usize].prompt_remaining as u64)
            .sum();
        let queued: u64 = self
            .queue
            .iter()
            .map(|&id| reqs[id as usize].admission_base())
            .sum();
        resident + queued
    }

    /// Predicted decode tokens outstanding across residents.
    pub fn outstanding_decode_tokens(&self, reqs: &[SimRequest]) -> u64 {
        self.residents
            .iter()
            .map(|r| reqs[r.id as usize].predicted_remaining())
            .sum()
    }

    pub fn is_routable(&self) -> bool {
        self.status == InstanceStatus::Active
    }

    pub fn has_work(&self) -> bool {
        !self.residents.is_empty() || !self.queue.is_empty()
    }

    /// Fraction of `window` seconds before `now` spent running
    /// iterations; the compute-occupancy proxy for routing.
    pub fn occupancy(&self, now: f64, window: f64) -> f64 {
        if window <= 0.0 {
            return 0.0;
        }
        let start = now - window;
        let mut busy = 0.0;
        for &(s, e) in &self.busy {
            let lo = s.max(start);
            let hi = e.min(now);
            if hi > lo {
                busy += hi - lo;
            }
        }
        if let Some(run) = &self.running {
            let lo = run.started.max(start);
            if now > lo {
                busy += now - lo;
            }
        }
        (busy / window).clamp(0.0, 1.0)
    }

    /// Plans and starts the next iteration at `now` if there is work.
    /// Must not be called while an iteration is running.
    pub fn plan_iteration(
        &mut self,
        reqs: &mut [SimRequest],
        cost: &CostModel,
        now: f64,
    ) -> PlanResult {
        debug_assert!(self.running.is_none(), "iteration already running");
        let mut result = PlanResult::default();
        let mut evicted_this_plan: HashSet<RequestId> = HashSet::new();

        loop {
            // Decode set: residents past prefill, in admission order.
            let decode: Vec<RequestId> = self
                .residents
                .iter()
                .filter(|r| reqs[r.id as usize].state == RequestState::Decoding)
                .map(|r| r.id)
                .collect();
            let mut projected = self.kv_used + decode.len() as u64;

            // Continuing chunks for residents still prefilling.
            let mut budget = cost.max_prefill_chunk;
            let mut chunks: Vec<(RequestId, u32)> = Vec::new();
            for r in &self.residents {
                if budget == 0 {
                    break;
                }
                let req = &reqs[r.id as usize];
                if req.state != RequestState::Prefilling {
                    continue;
                }
                let n = req.prompt_remaining.min(budget);
                if n == 0 {
                    continue;
                }
                budget -= n;
                if n == req.prompt_remaining {
                    projected += 1;
                }
                chunks.push((r.id, n));
            }

            // New admissions from the queue head; FIFO with no skipping.
            let mut admissions: Vec<(RequestId, u32)> = Vec::new();
            while budget > 0 {
                let Some(&head) = self.queue.front() else { break };
                if evicted_this_plan.contains(&head) {
                    break;
                }
                let base = reqs[head as usize].admission_base();
                if base + 1 > self.kv_capacity {
                    self.queue.pop_front();
                    let req = &mut reqs[head as usize];
                    req.state = RequestState::Aborted;
                    req.abort_reason = Some(AbortReason::Oversize);
                    result.aborted_oversize.push(head);
                    continue;
                }
                if projected + base + 1 > self.kv_capacity {
                    break;
                }
                self.queue.pop_front();
                let n = (base as u32).min(budget);
                budget -= n;
                projected += base;
                if n as u64 == base {
                    projected += 1;
                }
                admissions.push((head, n));
                let req = &mut reqs[head as usize];
                req.state = RequestState::Prefilling;
                req.admitted_generated = req.generated;
                req.prompt_remaining = base as u32;
                self.kv_used += base;
                self.residents.push(Resident {
                    id: head,
                    admit_seq: self.admit_seq,
                });
                self.admit_seq += 1;
            }

            if projected <= self.kv_capacity {
                let mut all_chunks = chunks;
                all_chunks.extend(admissions);
                if decode.is_empty() && all_chunks.is_empty() {
                    return result;
                }
                let prefill_total: u32 = all_chunks.iter().map(|&(_, n)| n).sum();
                let elapsed = cost.base_iteration_s
                    + cost.per_prefill_token_s * prefill_total as f64
                    + cost.per_decode_token_s * decode.len() as f64;
                self.running = Some(RunningIteration {
                    started: now,
                    ends: now + elapsed,
                    decode,
                    chunks: all_chunks,
                });
                result.scheduled = true;
                result.elapsed = elapsed;
                return result;
            }

            // Overflow can only come from decode growth or continuing
            // prefill completions: admissions are gated to fit, so a
            // failed attempt admitted nothing.
            debug_assert!(admissions.is_empty());
            let victim = self
                .residents
                .iter()
                .max_by_key(|r| r.admit_seq)
                .map(|r| r.id)
                .expect("kv overflow with no residents");
            self.evict_resident(victim, reqs);
            evicted_this_plan.insert(victim);
            result.evicted.push(victim);
        }
    }

    /// Removes a resident, frees its KV, and requeues it at the front
    /// for recompute.
    fn evict_resident(&mut self, id: RequestId, reqs: &mut [SimRequest]) {
        let pos = self
            .residents
            .iter()
            .position(|r| r.id == id)
            .expect("evicting a non-resident");
        self.residents.remove(pos);
        let req = &mut reqs[id as usize];
        self.kv_used -= req.kv_held();
        req.state = RequestState::Preempted;
        req.prompt_remaining = req.admission_base() as u32;
        req.preemptions += 1;
        self.queue.push_front(id);
        if self.map.tracked(id).is_some() {
            self.map.correct_early(id, 0);
        }
    }

    /// Applies the running iteration's effects at its end time, then
    /// steps the look-ahead map: first tokens admit predictions, the
    /// map advances one iteration, completions clear their tails, and
    /// residents that outlived their prediction get extensions.
    pub fn complete_iteration(&mut self, reqs: &mut [SimRequest], now: f64) -> IterationEffects {
        let run = self.running.take().expect("no running iteration");
        debug_assert!((run.ends - now).abs() < 1e-9);
        self.busy.push_back((run.started, run.ends));
        let mut effects = IterationEffects::default();

        for &id in &run.decode {
            let req = &mut reqs[id as usize];
            req.record_token(now);
            self.kv_used += 1;
            effects.decode_tokens += 1;
            effects.emitted.push(id);
            if req.generated == req.response_tokens {
                self.finish_resident(id, reqs, now);
                effects.completed.push(id);
            }
        }

        for &(id, n) in &run.chunks {
            let req = &mut reqs[id as usize];
            req.prompt_remaining -= n;
            effects.prefill_tokens += n as u64;
            self.win_prefill_tokens += n as u64;
            if req.prompt_remaining == 0 {
                req.state = RequestState::Decoding;
                req.record_token(now);
                self.kv_used += 1;
                effects.decode_tokens += 1;
                effects.emitted.push(id);
                effects.first_tokens.push(id);
                if req.generated == req.response_tokens {
                    self.finish_resident(id, reqs, now);
                    effects.completed.push(id);
                }
            }
        }
        self.win_decode_tokens += effects.decode_tokens;

        for &id in &effects.first_tokens {
            let req = &reqs[id as usize];
            if req.state == RequestState::Completed {
                continue;
            }
            let base = req.prompt_tokens as u64 + req.admitted_generated as u64;
            let horizon = (req.predicted_tokens as u64).saturating_sub(req.admitted_generated as u64);
            self.map.admit(id, base, horizon);
        }
        self.map.advance(1);
        for &id in &effects.completed {
            if self.map.tracked(id).is_some() {
                self.map.correct_early(id, 0);
            }
        }
        let extend: Vec<RequestId> = self
            .residents
            .iter()
            .filter(|r| {
                reqs[r.id as usize].state == RequestState::Decoding
                    && self.map.remaining(r.id) == Some(0)
            })
            .map(|r| r.id)
            .collect();
        for id in extend {
            self.map.extend_late(id);
        }
        effects
    }

    fn finish_resident(&mut self, id: RequestId, reqs: &mut [SimRequest], now: f64) {
        let pos = self
            .residents
            .iter()
            .position(|r| r.id == id)
            .expect("completing a non-resident");
        self.residents.remove(pos);
        let req = &mut reqs[id as usize];
        self.kv_used -= req.kv_held();
        req.state = RequestState::Completed;
        req.completion_time = Some(now);
    }

    /// Pulls every not-yet-admitted request off the instance queue, in
    /// order, for re-routing; residents stay and drain.
    pub fn drain_unadmitted(&mut self) -> Vec<RequestId> {
        self.queue.drain(..).collect()
    }

    pub fn push_busy_interval(&mut self, start: f64, end: f64) {
        self.busy.push_back((start, end));
    }

    pub fn prune_busy(&mut self, now: f64, window: f64) {
        while let Some(&(_, e)) = self.busy.front() {
            if e < now - window {
                self.busy.pop_front();
            } else {
                break;
            }
        }
    }

    /// Brute-force KV recount for validation.
    pub fn kv_ledger_sum(&self, reqs: &[SimRequest]) -> u64 {
        self.residents
            .iter()
            .map(|r| reqs[r.id as usize].kv_held())
            .sum()
    }

    pub fn reset_window_counters(&mut self) -> (u64, u64, bool) {
        let out = (
            self.win_prefill_tokens,
            self.win_decode_tokens,
            self.win_violation,
        );
        self.win_prefill_tokens = 0;
        self.win_decode_tokens = 0;
        self.win_violation = false;
        out
    }
}
