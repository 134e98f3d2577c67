//! Per-request simulation state and latency bookkeeping.

use serde::Serialize;

use crate::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    RouterQueued,
    InstanceQueued,
    Prefilling,
    Decoding,
    Preempted,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    QueueOverflow,
    Oversize,
}

#[derive(Debug, Clone)]
pub struct SimRequest {
    /// Identifier from the trace, carried through to reports.
    pub external_id: u64,
    pub arrival: f64,
    pub prompt_tokens: u32,
    /// Ground-truth response length; generation stops here.
    pub response_tokens: u32,
    /// Length predictor output, set when the request is routed.
    pub predicted_tokens: u32,
    pub generated: u32,
    pub state: RequestState,
    pub instance: Option<InstanceId>,
    /// Tokens still to (re)prefill; spans prompt plus any generated
    /// tokens lost to preemption.
    pub prompt_remaining: u32,
    /// Generated count at the current admission, fixed while resident.
    pub admitted_generated: u32,
    pub first_token_time: Option<f64>,
    pub completion_time: Option<f64>,
    pub abort_reason: Option<AbortReason>,
    pub preemptions: u32,
    last_emit: Option<f64>,
    gap_sum: f64,
    gap_max: f64,
    gap_count: u64,
}

impl SimRequest {
    pub fn new(external_id: u64, arrival: f64, prompt_tokens: u32, response_tokens: u32) -> Self {
        SimRequest {
            external_id,
            arrival,
            prompt_tokens,
            response_tokens,
            predicted_tokens: 0,
            generated: 0,
            state: RequestState::RouterQueued,
            instance: None,
            prompt_remaining: prompt_tokens,
            admitted_generated: 0,
            first_token_time: None,
            completion_time: None,
            abort_reason: None,
            preemptions: 0,
            last_emit: None,
            gap_sum: 0.0,
            gap_max: 0.0,
            gap_count: 0,
        }
    }

    /// KV tokens currently held while resident: the admitted base plus
    /// tokens generated since that admission.
    pub fn kv_held(&self) -> u64 {
        (self.prompt_tokens as u64 + self.admitted_generated as u64)
            + (self.generated - self.admitted_generated) as u64
    }

    /// Prompt plus retained generated tokens that a (re)admission must
    /// prefill and hold.
    pub fn admission_base(&self) -> u64 {
        self.prompt_tokens as u64 + self.generated as u64
    }

    pub fn record_token(&mut self, now: f64) {
        if let Some(prev) = self.last_emit {
            let gap = now - prev;
            self.gap_sum += gap;
            self.gap_max = self.gap_max.max(gap);
            self.gap_count += 1;
        } else {
            self.first_token_time = Some(now);
        }
        self.last_emit = Some(now);
        self.generated += 1;
    }

    pub fn tbt_mean(&self) -> Option<f64> {
        (self.gap_count > 0).then(|| self.gap_sum / self.gap_count as f64)
    }

    pub fn tbt_max(&self) -> Option<f64> {
        (self.gap_count > 0).then_some(self.gap_max)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, RequestState::Completed | RequestState::Aborted)
    }

    /// Predicted tokens still to generate, for routing load estimates.
    pub fn predicted_remaining(&self) -> u64 {
        (self.predicted_tokens as u64).saturating_sub(self.generated as u64)
    }
}
