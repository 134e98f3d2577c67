//! Deterministic event queue.
//!
//! Events dispatch in (time, kind rank, sequence) order. The kind rank
//! settles simultaneous events: boots land before the window boundary
//! observes the cluster, boundary work precedes scaler ticks, iteration
//! effects precede arrivals so freed capacity is visible to routing.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::{InstanceId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    BootComplete { instance: InstanceId },
    WindowBoundary,
    ScalerTick,
    IterationEnd { instance: InstanceId },
    Arrival { request: RequestId },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::BootComplete { .. } => 0,
            EventKind::WindowBoundary => 1,
            EventKind::ScalerTick => 2,
            EventKind::IterationEnd { .. } => 3,
            EventKind::Arrival { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite(), "event time must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(Event { time, kind, seq }));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}
