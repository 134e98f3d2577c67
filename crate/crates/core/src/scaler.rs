//! Instance-count control policies.
//!
//! The forecast-driven policy sets the fleet size at window boundaries
//! and corrects within the window from the instances' look-ahead maps:
//! projected overload boots extra instances, sustained projected
//! underload isolates down to what the projections justify, at most
//! once per window. Reactive and hybrid baselines work from current KV
//! watermarks instead; proactive uses boundaries only. Scale-down
//! always isolates (drain, never kill).

use serde::{Deserialize, Serialize};

use crate::simcore::{Cluster, InstanceStatus};
use crate::util::ceil_tol;
use crate::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerPolicy {
    Predictive,
    Reactive,
    Proactive,
    Hybrid,
    None,
}

impl ScalerPolicy {
    pub fn uses_forecast(&self) -> bool {
        matches!(
            self,
            ScalerPolicy::Predictive | ScalerPolicy::Proactive | ScalerPolicy::Hybrid
        )
    }

    pub fn uses_watermarks(&self) -> bool {
        matches!(self, ScalerPolicy::Reactive | ScalerPolicy::Hybrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalerConfig {
    pub policy: ScalerPolicy,
    pub tick_interval_s: f64,
    /// Iterations of look-ahead for overload and underload checks.
    pub lookahead: usize,
    pub overload_usage_threshold: f64,
    pub overload_iteration_fraction: f64,
    /// Projected-usage level below which instances are surplus.
    pub scale_down_threshold: f64,
    pub up_watermark: f64,
    pub down_watermark: f64,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            policy: ScalerPolicy::Predictive,
            tick_interval_s: 10.0,
            lookahead: 100,
            overload_usage_threshold: 0.95,
            overload_iteration_fraction: 0.10,
            scale_down_threshold: 0.30,
            up_watermark: 0.90,
            down_watermark: 0.30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleReason {
    WindowForecast,
    OverloadAnticipated,
    Underload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleAction {
    Boot { reason: ScaleReason },
    Isolate { instance: InstanceId, reason: ScaleReason },
}

#[derive(Debug)]
pub struct Scaler {
    pub cfg: ScalerConfig,
    scale_down_used: bool,
}

impl Scaler {
    pub fn new(cfg: ScalerConfig) -> Self {
        Scaler {
            cfg,
            scale_down_used: false,
        }
    }

    /// Applies a fresh window forecast: boot up to the target or
    /// isolate down to it. Resets the once-per-window scale-down gate.
    pub fn window_boundary(&mut self, target: Option<u32>, cluster: &Cluster) -> Vec<ScaleAction> {
        self.scale_down_used = false;
        if !self.cfg.policy.uses_forecast() {
            return Vec::new();
        }
        let Some(raw_target) = target else {
            return Vec::new();
        };
        let target = raw_target.clamp(cluster.min_instances, cluster.max_instances);
        let current = cluster.current_count();
        let reason = ScaleReason::WindowForecast;
        if target > current {
            (0..target - current).map(|_| ScaleAction::Boot { reason }).collect()
        } else if target < current {
            isolation_victims(cluster, current - target)
                .into_iter()
                .map(|instance| ScaleAction::Isolate { instance, reason })
                .collect()
        } else {
            Vec::new()
        }
    }

    /// Periodic within-window evaluation.
    pub fn tick(&mut self, cluster: &Cluster) -> Vec<ScaleAction> {
        match self.cfg.policy {
            ScalerPolicy::Predictive => self.tick_lookahead(cluster),
            ScalerPolicy::Reactive | ScalerPolicy::Hybrid => self.tick_watermarks(cluster),
            ScalerPolicy::Proactive | ScalerPolicy::None => Vec::new(),
        }
    }

    fn tick_lookahead(&mut self, cluster: &Cluster) -> Vec<ScaleAction> {
        let mut actions = Vec::new();
        let mut peaks: Vec<f64> = Vec::new();
        let mut overloaded = 0u32;
        for id in cluster.active_ids() {
            let map = &cluster.get(id).map;
            let frac = map.overload_fraction(
                self.cfg.lookahead,
                self.cfg.overload_usage_threshold,
                None,
            );
            if frac > self.cfg.overload_iteration_fraction {
                overloaded += 1;
            }
            peaks.push(map.peek_peak(self.cfg.lookahead, None));
        }

        // One boot per instance anticipated to overload.
        for _ in 0..overloaded {
            actions.push(ScaleAction::Boot {
                reason: ScaleReason::OverloadAnticipated,
            });
        }
        if overloaded > 0 || peaks.is_empty() {
            return actions;
        }

        // All projections low: shrink to what they justify, once per
        // window.
        if !self.scale_down_used
            && peaks.iter().all(|&p| p < self.cfg.scale_down_threshold)
        {
            self.scale_down_used = true;
            let keep = ceil_tol(peaks.iter().sum::<f64>() / self.cfg.scale_down_threshold) as u32;
            let current = cluster.current_count();
            let floor = cluster.min_instances.max(keep);
            if current > floor {
                for instance in isolation_victims(cluster, current - floor) {
                    actions.push(ScaleAction::Isolate {
                        instance,
                        reason: ScaleReason::Underload,
                    });
                }
            }
        }
        actions
    }

    fn tick_watermarks(&mut self, cluster: &Cluster) -> Vec<ScaleAction> {
        let usages: Vec<f64> = cluster
            .active_ids()
            .map(|id| cluster.get(id).kv_usage())
            .collect();
        if usages.is_empty() {
            return Vec::new();
        }
        let mean = usages.iter().sum::<f64>() / usages.len() as f64;
        if mean > self.cfg.up_watermark {
            vec![ScaleAction::Boot {
                reason: ScaleReason::OverloadAnticipated,
            }]
        } else if mean < self.cfg.down_watermark && cluster.current_count() > cluster.min_instances {
            isolation_victims(cluster, 1)
                .into_iter()
                .map(|instance| ScaleAction::Isolate {
                    instance,
                    reason: ScaleReason::Underload,
                })
                .collect()
        } else {
            Vec::new()
        }
    }
}

/// Picks `n` victims, emptiest first: cancelling a boot costs nothing,
/// then fewest resident KV tokens for the fastest drain.
fn isolation_victims(cluster: &Cluster, n: u32) -> Vec<InstanceId> {
    let mut candidates: Vec<(u8, u64, InstanceId)> = cluster
        .instances
        .iter()
        .filter(|i| matches!(i.status, InstanceStatus::Active | InstanceStatus::Booting))
        .map(|i| {
            let boot_rank = if i.status == InstanceStatus::Booting { 0 } else { 1 };
            (boot_rank, i.kv_used, i.id)
        })
        .collect();
    candidates.sort();
    candidates
        .into_iter()
        .take(n as usize)
        .map(|(_, _, id)| id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster_of(n: u32) -> Cluster {
        Cluster::new(n, 1, 16, 400, 16).unwrap()
    }

    fn predictive() -> Scaler {
        Scaler::new(ScalerConfig::default())
    }

    #[test]
    fn boundary_boots_up_to_forecast() {
        let cluster = cluster_of(3);
        let actions = predictive().window_boundary(Some(5), &cluster);
        assert_eq!(actions.len(), 2);
        assert!(actions.iter().all(|a| matches!(
            a,
            ScaleAction::Boot {
                reason: ScaleReason::WindowForecast
            }
        )));
    }

    #[test]
    fn boundary_isolates_down_to_forecast_emptiest_first() {
        let mut cluster = cluster_of(5);
        for (id, kv) in [(0u32, 50u64), (1, 10), (2, 30), (3, 5), (4, 40)] {
            cluster.get_mut(id).kv_used = kv;
        }
        let actions = predictive().window_boundary(Some(3), &cluster);
        let victims: Vec<InstanceId> = actions
            .iter()
            .map(|a| match a {
                ScaleAction::Isolate { instance, .. } => *instance,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(victims, vec![3, 1]);
    }

    #[test]
    fn boundary_matching_forecast_is_a_noop() {
        let cluster = cluster_of(4);
        assert!(predictive().window_boundary(Some(4), &cluster).is_empty());
    }

    #[test]
    fn boundary_clamps_forecast_to_maximum() {
        let cluster = cluster_of(3);
        // Max is 16; an absurd forecast boots only up to it.
        let actions = predictive().window_boundary(Some(40), &cluster);
        assert_eq!(actions.len(), 13);
    }

    #[test]
    fn overloaded_instances_each_boot_one() {
        let mut cluster = cluster_of(3);
        // Instance 1 projects 12 of 100 iterations above 95% usage.
        cluster.get_mut(1).map.admit(0, 381, 12);
        let actions = predictive().tick(&cluster);
        assert_eq!(
            actions,
            vec![ScaleAction::Boot {
                reason: ScaleReason::OverloadAnticipated
            }]
        );
    }

    #[test]
    fn boundary_overload_fraction_does_not_boot() {
        let mut cluster = cluster_of(1);
        // Exactly 10 of 100 iterations at the threshold is not over it.
        cluster.get_mut(0).map.admit(0, 381, 10);
        assert!(predictive().tick(&cluster).is_empty());
    }

    #[test]
    fn scale_down_keeps_sum_over_threshold_and_fires_once() {
        let mut cluster = Cluster::new(8, 1, 16, 400, 16).unwrap();
        // Each instance projects a 45/400 = 0.1125 peak; eight of them
        // sum to 0.9, so three instances are worth keeping.
        for id in 0..8 {
            cluster.get_mut(id).map.admit(0, 45, 1);
            cluster.get_mut(id).kv_used = 45 + id as u64;
        }
        let mut scaler = predictive();
        let actions = scaler.tick(&cluster);
        let victims: Vec<InstanceId> = actions
            .iter()
            .map(|a| match a {
                ScaleAction::Isolate {
                    instance,
                    reason: ScaleReason::Underload,
                } => *instance,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(victims, vec![0, 1, 2, 3, 4]);

        // Same conditions, same window: the gate blocks a second pass.
        assert!(scaler.tick(&cluster).is_empty());
        // A new window re-arms it.
        scaler.window_boundary(None, &cluster);
        assert_eq!(scaler.tick(&cluster).len(), 5);
    }

    #[test]
    fn reactive_watermarks_step_by_one() {
        let mut cluster = cluster_of(2);
        let mut scaler = Scaler::new(ScalerConfig {
            policy: ScalerPolicy::Reactive,
            ..ScalerConfig::default()
        });

        for id in 0..2 {
            cluster.get_mut(id).kv_used = 370; // mean 0.925
        }
        assert_eq!(
            scaler.tick(&cluster),
            vec![ScaleAction::Boot {
                reason: ScaleReason::OverloadAnticipated
            }]
        );

        for id in 0..2 {
            cluster.get_mut(id).kv_used = 200; // mean 0.5
        }
        assert!(scaler.tick(&cluster).is_empty());

        cluster.get_mut(0).kv_used = 100;
        cluster.get_mut(1).kv_used = 60; // mean 0.2
        assert_eq!(
            scaler.tick(&cluster),
            vec![ScaleAction::Isolate {
                instance: 1,
                reason: ScaleReason::Underload
            }]
        );
    }

    #[test]
    fn reactive_respects_minimum() {
        let mut cluster = Cluster::new(1, 1, 8, 400, 16).unwrap();
        cluster.get_mut(0).kv_used = 10;
        let mut scaler = Scaler::new(ScalerConfig {
            policy: ScalerPolicy::Reactive,
            ..ScalerConfig::default()
        });
        assert!(scaler.tick(&cluster).is_empty());
    }

    #[test]
    fn proactive_never_acts_within_window() {
        let mut cluster = cluster_of(1);
        cluster.get_mut(0).map.admit(0, 390, 16);
        let mut scaler = Scaler::new(ScalerConfig {
            policy: ScalerPolicy::Proactive,
            ..ScalerConfig::default()
        });
        assert!(scaler.tick(&cluster).is_empty());
    }
}
