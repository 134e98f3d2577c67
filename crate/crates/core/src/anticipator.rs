//! Per-instance look-ahead map: a projection of KV-cache occupancy over
//! upcoming batch iterations.
//!
//! Index `i` of the map estimates the resident token count at the `i`-th
//! future iteration of the owning instance. A request admitted with
//! prompt length `P` and predicted response length `D` contributes
//! `P + a` tokens at offset `a` for `a` in `[0, D)`: the prompt stays
//! resident while one token per iteration accrues. The map advances by
//! one slot per executed iteration, is corrected downward when a request
//! finishes earlier than predicted, and is extended in `ceil(D/5)`
//! steps while a request outlives its prediction.
//!
//! Internally the map stores whole token counts and only divides by the
//! KV capacity on read, so the incremental state is exactly equal to a
//! rebuild from the per-request ledger at all times. Values are not
//! clamped at capacity: projections above 1.0 are meaningful overload
//! signals.

use std::collections::HashMap;

use crate::RequestId;

/// Bookkeeping for one tracked request, in admission index space.
///
/// The live contribution covers offsets `[executed, horizon)`; offset
/// `a` maps to map slot `a - executed` and holds `base + a` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    /// Resident tokens at admission (prompt, plus any recomputed output).
    pub base: u64,
    /// Iterations executed since admission.
    pub executed: u64,
    /// Current predicted total horizon, including extensions.
    pub horizon: u64,
}

/// Result of a completion correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    /// Whether any projected tokens were actually removed.
    pub fired: bool,
    /// Offsets cleared, in admission index space.
    pub cleared: u64,
}

#[derive(Debug, Clone)]
pub struct LookAheadMap {
    capacity: u64,
    len: usize,
    origin: usize,
    tokens: Vec<i64>,
    entries: HashMap<RequestId, Entry>,
}

impl LookAheadMap {
    /// `capacity` is the instance KV capacity M in tokens; `len` is the
    /// map length L in iterations, normally the model's maximum output
    /// length.
    pub fn new(capacity: u64, len: usize) -> Self {
        assert!(capacity > 0, "kv capacity must be positive");
        assert!(len > 0, "map length must be positive");
        LookAheadMap {
            capacity,
            len,
            origin: 0,
            tokens: vec![0; len],
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.iter().all(|&t| t == 0)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn slot(&self, offset: u64) -> usize {
        (self.origin + offset as usize) % self.len
    }

    /// Projected resident tokens at the i-th future iteration.
    pub fn projected_tokens(&self, i: usize) -> i64 {
        assert!(i < self.len);
        self.tokens[(self.origin + i) % self.len]
    }

    /// Projected usage fraction at the i-th future iteration.
    pub fn usage_at(&self, i: usize) -> f64 {
        self.projected_tokens(i) as f64 / self.capacity as f64
    }

    /// First `l` usage fractions, for diagnostics dumps.
    pub fn snapshot(&self, l: usize) -> Vec<f64> {
        (0..l.min(self.len)).map(|i| self.usage_at(i)).collect()
    }

    pub fn tracked(&self, id: RequestId) -> Option<&Entry> {
        self.entries.get(&id)
    }

    pub fn tracked_count(&self) -> usize {
        self.entries.len()
    }

    /// Remaining projected iterations for a tracked request.
    pub fn remaining(&self, id: RequestId) -> Option<u64> {
        self.entries
            .get(&id)
            .map(|e| e.horizon.saturating_sub(e.executed))
    }

    /// Registers a request that finished prefilling with `base` resident
    /// tokens and `predicted` remaining iterations. The horizon is
    /// clamped to the map length; the effective horizon is returned.
    pub fn admit(&mut self, id: RequestId, base: u64, predicted: u64) -> u64 {
        let horizon = predicted.min(self.len as u64);
        let prev = self.entries.insert(
            id,
            Entry {
                base,
                executed: 0,
                horizon,
            },
        );
        debug_assert!(prev.is_none(), "request {id} admitted twice");
        for a in 0..horizon {
            let slot = self.slot(a);
            self.tokens[slot] += (base + a) as i64;
        }
        horizon
    }

    /// Removes the projection beyond `actual` total iterations for a
    /// request that completed (or left the instance). Offsets already
    /// executed have shifted out and are untouched. The entry is dropped
    /// once its live contribution is empty.
    pub fn correct_early(&mut self, id: RequestId, actual: u64) -> Correction {
        let Some(entry) = self.entries.get_mut(&id) else {
            return Correction {
                fired: false,
                cleared: 0,
            };
        };
        // A request advanced past its horizon has no live contribution
        // left; the entry is only dropped in that case.
        let new_horizon = if entry.horizon <= entry.executed {
            entry.horizon
        } else {
            actual.clamp(entry.executed, entry.horizon)
        };
        let (from, to) = (new_horizon, entry.horizon);
        entry.horizon = new_horizon;
        let (base, executed) = (entry.base, entry.executed);
        if entry.horizon <= entry.executed {
            self.entries.remove(&id);
        }
        for a in from..to {
            let offset = a - executed;
            debug_assert!((offset as usize) < self.len);
            let slot = self.slot(offset);
            self.tokens[slot] -= (base + a) as i64;
        }
        Correction {
            fired: to > from,
            cleared: to - from,
        }
    }

    /// Extends the projection of a request that is still decoding past
    /// its predicted horizon by `ceil(horizon / 5)` further iterations
    /// (at least one). Returns the new horizon. Callers repeat the call
    /// if a large advance left the request more than one extension
    /// behind.
    pub fn extend_late(&mut self, id: RequestId) -> Option<u64> {
        let entry = self.entries.get_mut(&id)?;
        let ext = ((entry.horizon + 4) / 5).max(1);
        let new_horizon = (entry.horizon + ext).min(entry.executed + self.len as u64);
        let from = entry.horizon.max(entry.executed);
        let to = new_horizon;
        entry.horizon = new_horizon;
        let (base, executed) = (entry.base, entry.executed);
        for a in from..to {
            let offset = a - executed;
            debug_assert!((offset as usize) < self.len);
            let slot = self.slot(offset);
            self.tokens[slot] += (base + a) as i64;
        }
        Some(new_horizon)
    }

    /// Shifts the map by `n` executed iterations. Slots that shift out
    /// are recycled as zeroed future slots.
    pub fn advance(&mut self, n: u64) {
        if n == 0 {
            return;
        }
        let clear = (n as usize).min(self.len);
        for i in 0..clear {
            let slot = (self.origin + i) % self.len;
            self.tokens[slot] = 0;
        }
        // Modulo keeps origin within the buffer even when n exceeds len;
        // in that case every slot was just zeroed and any origin works.
        self.origin = (self.origin + (n as usize) % self.len) % self.len;
        for entry in self.entries.values_mut() {
            entry.executed += n;
        }
    }

    /// Peak projected usage over the next `l` iterations, optionally
    /// with a hypothetical request of `(prompt, predicted)` admitted at
    /// offset zero. Has no side effects.
    pub fn peek_peak(&self, l: usize, virtual_req: Option<(u64, u64)>) -> f64 {
        let horizon = l.min(self.len);
        let mut peak = 0.0f64;
        for i in 0..horizon {
            let mut tokens = self.projected_tokens(i) as f64;
            if let Some((p, d)) = virtual_req {
                if (i as u64) < d {
                    tokens += (p + i as u64) as f64;
                }
            }
            let usage = tokens / self.capacity as f64;
            if usage > peak {
                peak = usage;
            }
        }
        peak
    }

    /// Fraction of the next `l` iterations whose projected usage is
    /// strictly above `threshold`, optionally with a hypothetical
    /// request applied.
    pub fn overload_fraction(
        &self,
        l: usize,
        threshold: f64,
        virtual_req: Option<(u64, u64)>,
    ) -> f64 {
        if l == 0 {
            return 0.0;
        }
        let horizon = l.min(self.len);
        let mut above = 0usize;
        for i in 0..horizon {
            let mut tokens = self.projected_tokens(i) as f64;
            if let Some((p, d)) = virtual_req {
                if (i as u64) < d {
                    tokens += (p + i as u64) as f64;
                }
            }
            if tokens / self.capacity as f64 > threshold {
                above += 1;
            }
        }
        above as f64 / l as f64
    }

    /// Reconstructs the projection from the per-request ledger alone.
    /// The incremental map must match this exactly; the simulator checks
    /// it in validation mode.
    pub fn rebuild_from_ledger(&self) -> Vec<i64> {
        let mut rebuilt = vec![0i64; self.len];
        for entry in self.entries.values() {
            for a in entry.executed..entry.horizon {
                let offset = (a - entry.executed) as usize;
                if offset < self.len {
                    rebuilt[offset] += (entry.base + a) as i64;
                }
            }
        }
        rebuilt
    }

    /// Current projection in front-to-back order, token counts.
    pub fn projection(&self) -> Vec<i64> {
        (0..self.len).map(|i| self.projected_tokens(i)).collect()
    }

    /// True when the incremental projection equals the ledger rebuild.
    pub fn ledger_consistent(&self) -> bool {
        self.projection() == self.rebuild_from_ledger()
    }
}
