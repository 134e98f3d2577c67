//! Instance collection: lifecycle transitions and resource accounting.
//!
//! Booting, active, and isolated instances all hold resources, so the
//! consumed instance-seconds integral covers all three. Stopped
//! instances are kept in place (ids stay stable) but cost nothing and
//! never serve again.

use serde::Serialize;

use crate::error::SimError;
use crate::simcore::instance::{CostModel, Instance, InstanceStatus};
use crate::InstanceId;

/// Instance counts by status at one moment, for timelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterSample {
    pub time: f64,
    pub booting: u32,
    pub active: u32,
    pub isolated: u32,
}

#[derive(Debug)]
pub struct Cluster {
    pub instances: Vec<Instance>,
    pub max_instances: u32,
    pub min_instances: u32,
    kv_capacity: u64,
    lookahead_len: usize,
    integral_instance_seconds: f64,
    last_sample_time: f64,
    pub timeline: Vec<ClusterSample>,
}

impl Cluster {
    pub fn new(
        initial: u32,
        min_instances: u32,
        max_instances: u32,
        kv_capacity: u64,
        lookahead_len: usize,
    ) -> Result<Self, SimError> {
        if initial < min_instances || initial > max_instances {
            return Err(SimError::State(format!(
                "initial instance count {initial} outside [{min_instances}, {max_instances}]"
            )));
        }
        let instances = (0..initial)
            .map(|id| Instance::new(id, kv_capacity, lookahead_len, InstanceStatus::Active))
            .collect();
        let mut cluster = Cluster {
            instances,
            max_instances,
            min_instances,
            kv_capacity,
            lookahead_len,
            integral_instance_seconds: 0.0,
            last_sample_time: 0.0,
            timeline: Vec::new(),
        };
        cluster.record_sample(0.0);
        Ok(cluster)
    }

    pub fn get(&self, id: InstanceId) -> &Instance {
        &self.instances[id as usize]
    }

    pub fn get_mut(&mut self, id: InstanceId) -> &mut Instance {
        &mut self.instances[id as usize]
    }

    pub fn active_ids(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.instances
            .iter()
            .filter(|i| i.status == InstanceStatus::Active)
            .map(|i| i.id)
    }

    pub fn count(&self, status: InstanceStatus) -> u32 {
        self.instances.iter().filter(|i| i.status == status).count() as u32
    }

    /// Active plus booting: the scaler's working count.
    pub fn current_count(&self) -> u32 {
        self.count(InstanceStatus::Active) + self.count(InstanceStatus::Booting)
    }

    fn consuming_count(&self) -> u32 {
        self.instances
            .iter()
            .filter(|i| i.status != InstanceStatus::Stopped)
            .count() as u32
    }

    /// Advances the consumption integral to `now`. Must be called
    /// before any status change and at simulation end.
    pub fn accrue(&mut self, now: f64) {
        let dt = now - self.last_sample_time;
        debug_assert!(dt >= -1e-9, "cluster clock moved backwards");
        if dt > 0.0 {
            self.integral_instance_seconds += dt * self.consuming_count() as f64;
            self.last_sample_time = now;
        }
    }

    fn record_sample(&mut self, now: f64) {
        let sample = ClusterSample {
            time: now,
            booting: self.count(InstanceStatus::Booting),
            active: self.count(InstanceStatus::Active),
            isolated: self.count(InstanceStatus::Isolated),
        };
        if let Some(last) = self.timeline.last_mut() {
            if last.time == now {
                *last = sample;
                return;
            }
        }
        self.timeline.push(sample);
    }

    /// Starts a new instance booting; routable after the cold start.
    pub fn boot_instance(&mut self, now: f64, cost: &CostModel) -> Result<InstanceId, SimError> {
        if self.current_count() >= self.max_instances {
            return Err(SimError::State(format!(
                "scale denied: already at maximum {} instances",
                self.max_instances
            )));
        }
        self.accrue(now);
        let id = self.instances.len() as InstanceId;
        let mut inst = Instance::new(id, self.kv_capacity, self.lookahead_len, InstanceStatus::Booting);
        inst.boot_ready = now + cost.cold_start_s;
        self.instances.push(inst);
        self.record_sample(now);
        Ok(id)
    }

    pub fn on_boot_complete(&mut self, id: InstanceId, now: f64) {
        self.accrue(now);
        let inst = &mut self.instances[id as usize];
        // A boot cancelled by scale-down leaves a stale event behind.
        if inst.status == InstanceStatus::Booting {
            inst.status = InstanceStatus::Active;
        }
        self.record_sample(now);
    }

    /// Removes an instance from routing. A booting victim stops
    /// outright; an empty one stops immediately; otherwise it drains.
    pub fn isolate(&mut self, id: InstanceId, now: f64) {
        self.accrue(now);
        let inst = &mut self.instances[id as usize];
        match inst.status {
            InstanceStatus::Booting => inst.status = InstanceStatus::Stopped,
            InstanceStatus::Active => {
                if inst.resident_count() == 0 && inst.running.is_none() {
                    inst.status = InstanceStatus::Stopped;
                } else {
                    inst.status = InstanceStatus::Isolated;
                }
            }
            _ => {}
        }
        self.record_sample(now);
    }

    /// Called when an isolated instance finishes its last resident.
    pub fn stop_if_drained(&mut self, id: InstanceId, now: f64) {
        let inst = &self.instances[id as usize];
        if inst.status == InstanceStatus::Isolated
            && inst.resident_count() == 0
            && inst.running.is_none()
        {
            self.accrue(now);
            self.instances[id as usize].status = InstanceStatus::Stopped;
            self.record_sample(now);
        }
    }

    pub fn finish(&mut self, now: f64) {
        self.accrue(now);
        self.record_sample(now);
    }

    pub fn instance_seconds(&self) -> f64 {
        self.integral_instance_seconds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> CostModel {
        CostModel {
            cold_start_s: 30.0,
            ..CostModel::default()
        }
    }

    #[test]
    fn boot_becomes_active_after_cold_start() {
        let mut c = Cluster::new(1, 1, 8, 1000, 16).unwrap();
        let id = c.boot_instance(100.0, &cost()).unwrap();
        assert_eq!(c.get(id).status, InstanceStatus::Booting);
        assert_eq!(c.get(id).boot_ready, 130.0);
        assert_eq!(c.current_count(), 2);
        c.on_boot_complete(id, 130.0);
        assert_eq!(c.get(id).status, InstanceStatus::Active);
        assert_eq!(c.active_ids().count(), 2);
    }

    #[test]
    fn boot_at_maximum_is_denied() {
        let mut c = Cluster::new(2, 1, 2, 1000, 16).unwrap();
        assert!(c.boot_instance(0.0, &cost()).is_err());
        assert_eq!(c.instances.len(), 2);
    }

    #[test]
    fn two_boots_same_tick_get_distinct_ids() {
        let mut c = Cluster::new(1, 1, 8, 1000, 16).unwrap();
        let a = c.boot_instance(5.0, &cost()).unwrap();
        let b = c.boot_instance(5.0, &cost()).unwrap();
        assert_ne!(a, b);
        c.on_boot_complete(a, 35.0);
        c.on_boot_complete(b, 35.0);
        assert_eq!(c.active_ids().count(), 3);
    }

    #[test]
    fn consumption_integrates_over_status_changes() {
        // One instance over [0, 100] plus a second from t=50: 150 s.
        let mut c = Cluster::new(1, 1, 8, 1000, 16).unwrap();
        let id = c.boot_instance(50.0, &cost()).unwrap();
        c.on_boot_complete(id, 80.0);
        c.finish(100.0);
        assert!((c.instance_seconds() - 150.0).abs() < 1e-9);
    }

    #[test]
    fn empty_isolation_stops_immediately_and_stops_consuming() {
        let mut c = Cluster::new(2, 1, 8, 1000, 16).unwrap();
        c.isolate(1, 40.0);
        assert_eq!(c.get(1).status, InstanceStatus::Stopped);
        c.finish(100.0);
        // 2 instances for 40 s, then 1 for 60 s.
        assert!((c.instance_seconds() - 140.0).abs() < 1e-9);
        let last = c.timeline.last().unwrap();
        assert_eq!((last.booting, last.active, last.isolated), (0, 1, 0));
    }

    #[test]
    fn cancelled_boot_ignores_stale_completion_event() {
        let mut c = Cluster::new(1, 1, 8, 1000, 16).unwrap();
        let id = c.boot_instance(0.0, &cost()).unwrap();
        c.isolate(id, 10.0);
        assert_eq!(c.get(id).status, InstanceStatus::Stopped);
        c.on_boot_complete(id, 30.0);
        assert_eq!(c.get(id).status, InstanceStatus::Stopped);
    }
}
